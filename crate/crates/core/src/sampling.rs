//! Bernoulli observation of tensor entries, independent sample splitting,
//! and the observation file format.
//!
//! Unobserved entries are absent, never stored as zeros. All sampling is a
//! pure function of `(input, seed)`; entries are kept sorted by index so
//! downstream float accumulation orders are reproducible.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::EntrySource;

/// One revealed entry, 0-based indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub i: u32,
    pub j: u32,
    pub k: u32,
    pub value: f64,
}

/// Sparse COO record of revealed entries plus sampling metadata.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    dims: (usize, usize, usize),
    p: f64,
    seed: u64,
    entries: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(dims: (usize, usize, usize), p: f64, seed: u64, mut entries: Vec<Observation>) -> Result<Self> {
        // p = 0 is admitted only for the empty set produced by degenerate splits
        let p_ok = (p > 0.0 && p <= 1.0) || (p == 0.0 && entries.is_empty());
        if !p_ok {
            return Err(Error::InvalidArgument(format!("sampling probability {} outside (0, 1]", p)));
        }
        for e in &entries {
            if e.i as usize >= dims.0 || e.j as usize >= dims.1 || e.k as usize >= dims.2 {
                return Err(Error::Dimension(format!(
                    "entry ({}, {}, {}) outside dims {:?}",
                    e.i, e.j, e.k, dims
                )));
            }
            if !e.value.is_finite() {
                return Err(Error::InvalidArgument("observed values must be finite".into()));
            }
        }
        entries.sort_unstable_by_key(|e| (e.i, e.j, e.k));
        if entries.windows(2).any(|w| (w[0].i, w[0].j, w[0].k) == (w[1].i, w[1].j, w[1].k)) {
            return Err(Error::InvalidArgument("duplicate observation index".into()));
        }
        Ok(Self { dims, p, seed, entries })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    /// Fresh uniformly random half of the support (without replacement).
    pub fn subsample_half(&self, seed: u64) -> ObservationSet {
        let m = self.entries.len();
        let keep = m / 2;
        let mut rng = rng_from_seed(seed);
        // partial Fisher-Yates over index positions
        let mut idx: Vec<u32> = (0..m as u32).collect();
        for t in 0..keep {
            let swap = rng.gen_range(t..m);
            idx.swap(t, swap);
        }
        let mut chosen: Vec<Observation> = idx[..keep].iter().map(|&t| self.entries[t as usize]).collect();
        chosen.sort_unstable_by_key(|e| (e.i, e.j, e.k));
        ObservationSet {
            dims: self.dims,
            p: self.p / 2.0,
            seed,
            entries: chosen,
        }
    }
}

/// Reveal each entry of `source` independently with probability `p`.
///
/// Implemented as a binomial count followed by a uniform distinct-index
/// draw, which is distributionally identical to per-entry coin flips and
/// never touches all `n^3` cells when `p` is small.
pub fn sample<T: EntrySource>(source: &T, p: f64, seed: u64) -> Result<ObservationSet> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling probability {} outside (0, 1]", p)));
    }
    let (n1, n2, n3) = source.dims();
    let total = (n1 as u64) * (n2 as u64) * (n3 as u64);
    let mut rng = rng_from_seed(seed);

    let count = if p == 1.0 {
        total
    } else {
        Binomial::new(total, p)
            .map_err(|e| Error::InvalidArgument(format!("binomial: {}", e)))?
            .sample(&mut rng)
    };

    let decode = |lin: u64| -> (u32, u32, u32) {
        let k = (lin % n3 as u64) as u32;
        let rest = lin / n3 as u64;
        let j = (rest % n2 as u64) as u32;
        let i = (rest / n2 as u64) as u32;
        (i, j, k)
    };

    let mut linear: Vec<u64> = if count == total {
        (0..total).collect()
    } else if count * 2 <= total {
        // rejection-sample `count` distinct indices
        let mut set = HashSet::with_capacity(count as usize);
        while (set.len() as u64) < count {
            set.insert(rng.gen_range(0..total));
        }
        set.into_iter().collect()
    } else {
        // dense regime: sample the complement instead
        let excluded = total - count;
        let mut set = HashSet::with_capacity(excluded as usize);
        while (set.len() as u64) < excluded {
            set.insert(rng.gen_range(0..total));
        }
        (0..total).filter(|lin| !set.contains(lin)).collect()
    };
    linear.sort_unstable();

    let entries = linear
        .into_iter()
        .map(|lin| {
            let (i, j, k) = decode(lin);
            Observation {
                i,
                j,
                k,
                value: source.entry(i as usize, j as usize, k as usize),
            }
        })
        .collect();
    ObservationSet::new((n1, n2, n3), p, seed, entries)
}

const PROB_SLACK: f64 = 1e-12;

/// Split one Bernoulli(p) sample into two independent Bernoulli(p1) and
/// Bernoulli(p2) samples. Per observed entry: reveal in only the first with
/// probability `(p1 - p1 p2)/p`, only the second with `(p2 - p1 p2)/p`,
/// both with `p1 p2 / p`, neither otherwise.
pub fn split(obs: &ObservationSet, p1: f64, p2: f64, seed: u64) -> Result<(ObservationSet, ObservationSet)> {
    let p = obs.p();
    if p1 < 0.0 || p2 < 0.0 || p1 + p2 > p + PROB_SLACK {
        return Err(Error::Budget(format!(
            "split probabilities p1={} p2={} exceed source probability p={}",
            p1, p2, p
        )));
    }
    let q_both = p1 * p2 / p;
    let q_first = (p1 - p1 * p2) / p;
    let q_second = (p2 - p1 * p2) / p;
    let mut rng = rng_from_seed(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for e in obs.entries() {
        let u: f64 = rng.gen();
        if u < q_first {
            first.push(*e);
        } else if u < q_first + q_second {
            second.push(*e);
        } else if u < q_first + q_second + q_both {
            first.push(*e);
            second.push(*e);
        }
    }
    let dims = obs.dims();
    let out1 = ObservationSet::new(dims, p1, seed, first)?;
    let out2 = ObservationSet::new(dims, p2, seed, second)?;
    Ok((out1, out2))
}

/// Split into `k` pairwise-independent Bernoulli(p') samples by iterating
/// the two-way split against the remaining budget.
pub fn split_k(obs: &ObservationSet, k: usize, p_prime: f64, seed: u64) -> Result<Vec<ObservationSet>> {
    if k == 0 {
        return Err(Error::InvalidArgument("split count must be at least 1".into()));
    }
    if (k as f64) * p_prime > obs.p() + PROB_SLACK {
        return Err(Error::Budget(format!(
            "k * p' = {} exceeds source probability {}",
            k as f64 * p_prime,
            obs.p()
        )));
    }
    let mut outputs = Vec::with_capacity(k);
    let mut rest = obs.clone();
    for t in 0..k {
        let remaining_after = rest.p() - p_prime;
        let (out, new_rest) = split(&rest, p_prime, remaining_after.max(0.0), derive_seed(seed, t as u64))?;
        outputs.push(out);
        rest = new_rest;
    }
    Ok(outputs)
}

/// Serialize: header `n1 n2 n3 p count`, then `count` lines `i j k value`.
/// Floats use 17 significant digits so the round trip is bit-faithful.
pub fn write_observations(obs: &ObservationSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    let (n1, n2, n3) = obs.dims();
    writeln!(out, "{} {} {} {:.16e} {}", n1, n2, n3, obs.p(), obs.len()).expect("string write");
    for e in obs.entries() {
        writeln!(out, "{} {} {} {:.16e}", e.i, e.j, e.k, e.value).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<ObservationSet> {
    let text = std::fs::read_to_string(path)?;
    parse_observations(&text)
}

pub fn parse_observations(text: &str) -> Result<ObservationSet> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty file".into() })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `n1 n2 n3 p count`, got {} fields", fields.len()),
        });
    }
    let parse_usize = |s: &str, line: usize| -> Result<usize> {
        s.parse().map_err(|e| Error::Parse { line, message: format!("bad integer `{}`: {}", s, e) })
    };
    let parse_f64 = |s: &str, line: usize| -> Result<f64> {
        s.parse().map_err(|e| Error::Parse { line, message: format!("bad float `{}`: {}", s, e) })
    };
    let dims = (
        parse_usize(fields[0], 1)?,
        parse_usize(fields[1], 1)?,
        parse_usize(fields[2], 1)?,
    );
    let p = parse_f64(fields[3], 1)?;
    let count = parse_usize(fields[4], 1)?;

    let mut entries = Vec::with_capacity(count);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected `i j k value`, got {} fields", f.len()),
            });
        }
        entries.push(Observation {
            i: parse_usize(f[0], line_no)? as u32,
            j: parse_usize(f[1], line_no)? as u32,
            k: parse_usize(f[2], line_no)? as u32,
            value: parse_f64(f[3], line_no)?,
        });
    }
    if entries.len() != count {
        return Err(Error::Parse {
            line: 1,
            message: format!("header promised {} entries, found {}", count, entries.len()),
        });
    }
    ObservationSet::new(dims, p, 0, entries)
}

/// Probability budget for the full exact-completion pipeline:
/// `p1 + p2 + p3 <= p` and `k * p' <= p2`.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub p: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub k: usize,
    pub p_prime: f64,
}

impl SamplingPlan {
    pub fn new(p: f64, p1: f64, p2: f64, p3: f64, k: usize, p_prime: f64) -> Result<Self> {
        for (name, v) in [("p", p), ("p1", p1), ("p2", p2), ("p3", p3), ("p'", p_prime)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{} = {} outside [0, 1]", name, v)));
            }
        }
        if p1 + p2 + p3 > p + PROB_SLACK {
            return Err(Error::Budget(format!("p1 + p2 + p3 = {} exceeds p = {}", p1 + p2 + p3, p)));
        }
        if k as f64 * p_prime > p2 + PROB_SLACK {
            return Err(Error::Budget(format!("k * p' = {} exceeds p2 = {}", k as f64 * p_prime, p2)));
        }
        Ok(Self { p, p1, p2, p3, k, p_prime })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::gen_uncorrelated;

    #[test]
    fn full_observation() {
        let cp = gen_uncorrelated(6, 2, 3).unwrap();
        let obs = sample(&cp, 1.0, 0).unwrap();
        assert_eq!(obs.len(), 216);
        assert_eq!(obs.entries()[0].value, crate::tensor::EntrySource::entry(&cp, 0, 0, 0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let cp = gen_uncorrelated(10, 2, 5).unwrap();
        let a = sample(&cp, 0.3, 77).unwrap();
        let b = sample(&cp, 0.3, 77).unwrap();
        assert_eq!(a.entries(), b.entries());
        let c = sample(&cp, 0.3, 78).unwrap();
        assert_ne!(a.entries(), c.entries());
    }

    #[test]
    fn observed_count_within_binomial_bounds() {
        let cp = gen_uncorrelated(40, 2, 9).unwrap();
        let total = 40f64.powi(3);
        let p = 0.3;
        let obs = sample(&cp, p, 123).unwrap();
        let mean = p * total;
        let sd = (total * p * (1.0 - p)).sqrt();
        let dev = (obs.len() as f64 - mean).abs();
        assert!(dev < 4.0 * sd, "count {} deviates {:.1} sds", obs.len(), dev / sd);
    }

    #[test]
    fn split_degenerate_second() {
        let cp = gen_uncorrelated(8, 2, 1).unwrap();
        let obs = sample(&cp, 0.5, 4).unwrap();
        let (a, b) = split(&obs, 0.25, 0.0, 11).unwrap();
        assert!(b.is_empty());
        assert!(!a.is_empty());
        // subset property
        let support: HashSet<(u32, u32, u32)> = obs.entries().iter().map(|e| (e.i, e.j, e.k)).collect();
        assert!(a.entries().iter().all(|e| support.contains(&(e.i, e.j, e.k))));
    }

    #[test]
    fn split_counts_and_joint_rate() {
        let cp = gen_uncorrelated(30, 2, 2).unwrap();
        let total = 30f64.powi(3);
        let p = 0.5;
        let obs = sample(&cp, p, 21).unwrap();
        let (a, b) = split(&obs, p / 2.0, p / 2.0, 22).unwrap();
        let mean = (p / 2.0) * total;
        let sd = (total * (p / 2.0) * (1.0 - p / 2.0)).sqrt();
        for part in [&a, &b] {
            assert!((part.len() as f64 - mean).abs() < 4.0 * sd);
        }
        // joint inclusion should look like independent Bernoulli(p/2)^2
        let sa: HashSet<(u32, u32, u32)> = a.entries().iter().map(|e| (e.i, e.j, e.k)).collect();
        let joint = b.entries().iter().filter(|e| sa.contains(&(e.i, e.j, e.k))).count();
        let jmean = (p / 2.0) * (p / 2.0) * total;
        let jsd = (total * (p / 2.0) * (p / 2.0) * (1.0 - (p / 2.0) * (p / 2.0))).sqrt();
        assert!(
            (joint as f64 - jmean).abs() < 4.0 * jsd,
            "joint count {} vs mean {:.1}",
            joint,
            jmean
        );
    }

    #[test]
    fn split_k_counts_and_support() {
        let cp = gen_uncorrelated(20, 2, 6).unwrap();
        let obs = sample(&cp, 0.6, 31).unwrap();
        let parts = split_k(&obs, 4, 0.12, 32).unwrap();
        assert_eq!(parts.len(), 4);
        let total = 20f64.powi(3);
        let support: HashSet<(u32, u32, u32)> = obs.entries().iter().map(|e| (e.i, e.j, e.k)).collect();
        for part in &parts {
            let mean = 0.12 * total;
            let sd = (total * 0.12 * 0.88).sqrt();
            assert!((part.len() as f64 - mean).abs() < 4.0 * sd);
            assert!(part.entries().iter().all(|e| support.contains(&(e.i, e.j, e.k))));
        }
        // single split is a plain thinning
        let single = split_k(&obs, 1, 0.3, 33).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn budget_violations_rejected() {
        let cp = gen_uncorrelated(8, 2, 1).unwrap();
        let obs = sample(&cp, 0.2, 4).unwrap();
        assert!(split(&obs, 0.15, 0.10, 5).is_err());
        assert!(split_k(&obs, 3, 0.1, 5).is_err());
        assert!(SamplingPlan::new(0.2, 0.1, 0.05, 0.1, 2, 0.02).is_err());
        assert!(SamplingPlan::new(0.2, 0.05, 0.1, 0.05, 6, 0.02).is_err());
        assert!(SamplingPlan::new(0.2, 0.05, 0.1, 0.05, 5, 0.02).is_ok());
    }

    #[test]
    fn file_round_trip() {
        let cp = gen_uncorrelated(7, 2, 8).unwrap();
        let obs = sample(&cp, 0.4, 14).unwrap();
        let dir = std::env::temp_dir().join("kroncomp_obs_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.txt");
        write_observations(&obs, &path).unwrap();
        let back = read_observations(&path).unwrap();
        assert_eq!(back.dims(), obs.dims());
        assert_eq!(back.p(), obs.p());
        assert_eq!(back.entries(), obs.entries());

        // empty entry list round-trips
        let empty = ObservationSet::new((3, 3, 3), 0.5, 0, vec![]).unwrap();
        write_observations(&empty, &path).unwrap();
        assert!(read_observations(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "2 2 2 5.0e-1 2\n0 0 0 1.5\n1 2 x 0.5\n";
        match parse_observations(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn marginal_rate_and_independence_statistics() {
        // fixed probe entries, 200 repetitions: empirical inclusion rate of
        // output 1 close to p1, indicator covariance between outputs small
        let n = 20;
        let cp = gen_uncorrelated(n, 2, 40).unwrap();
        let p = 0.5;
        let p1 = 0.2;
        let p2 = 0.2;
        let reps = 200;
        let probes: Vec<(u32, u32, u32)> = (0..50u32).map(|t| (t % 20, (3 * t + 1) % 20, (7 * t + 2) % 20)).collect();
        let mut in1 = vec![0f64; probes.len()];
        let mut in2 = vec![0f64; probes.len()];
        let mut both = vec![0f64; probes.len()];
        for rep in 0..reps {
            let obs = sample(&cp, p, 1000 + rep).unwrap();
            let (a, b) = split(&obs, p1, p2, 2000 + rep).unwrap();
            let sa: HashSet<(u32, u32, u32)> = a.entries().iter().map(|e| (e.i, e.j, e.k)).collect();
            let sb: HashSet<(u32, u32, u32)> = b.entries().iter().map(|e| (e.i, e.j, e.k)).collect();
            for (t, probe) in probes.iter().enumerate() {
                let ia = sa.contains(probe) as u8 as f64;
                let ib = sb.contains(probe) as u8 as f64;
                in1[t] += ia;
                in2[t] += ib;
                both[t] += ia * ib;
            }
        }
        let reps_f = reps as f64;
        let bound = 5.0 / reps_f.sqrt();
        for t in 0..probes.len() {
            let rate1 = in1[t] / reps_f;
            assert!((rate1 - p1).abs() < bound, "probe {} rate {} vs {}", t, rate1, p1);
            let cov = both[t] / reps_f - (in1[t] / reps_f) * (in2[t] / reps_f);
            assert!(cov.abs() < 0.05, "probe {} covariance {}", t, cov);
        }
    }
}
