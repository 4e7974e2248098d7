//! Experiment orchestration: single completion trials, the full exact
//! pipeline, parameter sweeps with success frontiers, and CSV/JSON
//! emission. Trials are deterministic functions of their config and seed;
//! sweeps parallelize over trials and collect results in trial order so
//! emitted files are byte-stable.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::altmin::{
    kron_altmin, standard_altmin, unfolding_altmin, AltMinConfig, FactorEstimate, IterationStat, Schedule,
};
use crate::error::{Error, Result};
use crate::jennrich::jennrich_core;
use crate::postprocess::{build_polytope, convex_refine, project_to_subspaces, RefineOptions};
use crate::rng::derive_seed;
use crate::sampling::{sample, split, ObservationSet, SamplingPlan};
use crate::spectral::{init_subspaces, InitConfig};
use crate::subspace::SubspaceTriple;
use crate::synthetic::{add_noise, gen_correlated, gen_uncorrelated, NoiseSpec, DEFAULT_RHO};
use crate::tensor::{normalized_mse_cp, CPDecomposition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Algorithm {
    Kronecker,
    Standard,
    Unfolding,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algorithm::Kronecker => write!(f, "kronecker"),
            Algorithm::Standard => write!(f, "standard"),
            Algorithm::Unfolding => write!(f, "unfolding"),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kronecker" => Ok(Algorithm::Kronecker),
            "standard" => Ok(Algorithm::Standard),
            "unfolding" => Ok(Algorithm::Unfolding),
            other => Err(Error::InvalidArgument(format!("unknown algorithm `{}`", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Family {
    Uncorrelated,
    Correlated,
}

impl Family {
    pub fn generate(self, n: usize, r: usize, seed: u64) -> Result<CPDecomposition> {
        match self {
            Family::Uncorrelated => gen_uncorrelated(n, r, seed),
            Family::Correlated => gen_correlated(n, r, DEFAULT_RHO, seed),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncorrelated" => Ok(Family::Uncorrelated),
            "correlated" => Ok(Family::Correlated),
            other => Err(Error::InvalidArgument(format!("unknown family `{}`", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Random,
    Spectral,
}

/// Everything a single trial needs.
#[derive(Debug, Clone)]
pub struct TrialConfig {
    pub trial_id: u64,
    pub algorithm: Algorithm,
    pub family: Family,
    pub n: usize,
    pub r: usize,
    pub num_obs: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub iters: usize,
    pub schedule: Schedule,
    pub init: InitKind,
    pub track_angles: bool,
    pub stop_mse: Option<f64>,
    pub sequential: bool,
    /// Run the full exact pipeline instead of plain alternating
    /// minimization (Kronecker only).
    pub exact: Option<PipelineConfig>,
}

impl TrialConfig {
    pub fn new(algorithm: Algorithm, family: Family, n: usize, r: usize, num_obs: usize, seed: u64) -> Self {
        Self {
            trial_id: 0,
            algorithm,
            family,
            n,
            r,
            num_obs,
            noise_level: 0.0,
            seed,
            iters: 100,
            schedule: Schedule::SubsampleHalf,
            init: InitKind::Random,
            track_angles: false,
            stop_mse: Some(1e-9),
            sequential: false,
            exact: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TrialStatus {
    Converged,
    Completed,
    Failed(String),
}

impl TrialStatus {
    fn label(&self) -> String {
        match self {
            TrialStatus::Converged => "converged".into(),
            TrialStatus::Completed => "completed".into(),
            TrialStatus::Failed(msg) => format!("failed: {}", msg.replace([',', '\n'], ";")),
        }
    }
}

/// One experiment's per-iteration trace plus identifying metadata.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub algorithm: String,
    pub n: usize,
    pub r: usize,
    pub num_obs: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub iterations: Vec<IterationStat>,
    pub status: TrialStatus,
}

impl TrialRecord {
    pub fn final_mse(&self) -> Option<f64> {
        self.iterations.iter().rev().find_map(|s| s.normalized_mse)
    }
}

/// Run one trial: generate (or regenerate) the truth, sample, optionally
/// noise, run the selected algorithm with per-iteration tracking.
/// Algorithm failures land in the record's status, never panic or error.
pub fn run_trial(cfg: &TrialConfig) -> TrialRecord {
    let mut record = TrialRecord {
        trial_id: cfg.trial_id,
        algorithm: cfg.algorithm.to_string(),
        n: cfg.n,
        r: cfg.r,
        num_obs: cfg.num_obs,
        noise_level: cfg.noise_level,
        seed: cfg.seed,
        iterations: Vec::new(),
        status: TrialStatus::Completed,
    };
    match run_trial_inner(cfg) {
        Ok((iterations, converged)) => {
            record.iterations = iterations;
            record.status = if converged { TrialStatus::Converged } else { TrialStatus::Completed };
        }
        Err(e) => {
            record.status = TrialStatus::Failed(e.to_string());
        }
    }
    record
}

fn run_trial_inner(cfg: &TrialConfig) -> Result<(Vec<IterationStat>, bool)> {
    let total = (cfg.n * cfg.n * cfg.n) as f64;
    let p = (cfg.num_obs as f64 / total).min(1.0);
    if p <= 0.0 {
        return Err(Error::InvalidArgument("num_obs must be positive".into()));
    }
    let truth = cfg.family.generate(cfg.n, cfg.r, derive_seed(cfg.seed, 1))?;
    let mut obs = sample(&truth, p, derive_seed(cfg.seed, 2))?;
    if cfg.noise_level > 0.0 {
        obs = add_noise(&obs, NoiseSpec::new(cfg.noise_level)?, truth.rms_entry(), derive_seed(cfg.seed, 3))?;
    }

    if let Some(pipeline) = &cfg.exact {
        if cfg.algorithm != Algorithm::Kronecker {
            return Err(Error::InvalidArgument("exact mode runs the Kronecker pipeline".into()));
        }
        let outcome = exact_pipeline(&obs, pipeline, Some(&truth))?;
        let mut iterations = outcome.altmin_trace;
        let final_mse = normalized_mse_cp(&outcome.estimate, &truth)?;
        let next_iter = iterations.last().map(|s| s.iteration + 1).unwrap_or(0);
        iterations.push(IterationStat {
            iteration: next_iter,
            normalized_mse: Some(final_mse),
            max_angle: None,
            wall_time_ms: outcome.post_wall_ms,
        });
        let converged = cfg.stop_mse.map(|t| final_mse < t).unwrap_or(false);
        return Ok((iterations, converged));
    }

    let altmin_cfg = AltMinConfig {
        rank: cfg.r,
        iters: cfg.iters,
        schedule: cfg.schedule,
        ls_ridge: 1e-12,
        sequential: cfg.sequential,
        track_angles: cfg.track_angles,
        stop_mse: cfg.stop_mse,
        seed: derive_seed(cfg.seed, 5),
    };
    match cfg.algorithm {
        Algorithm::Kronecker => {
            let init = match cfg.init {
                InitKind::Random => SubspaceTriple::random(cfg.n, cfg.r, derive_seed(cfg.seed, 4))?,
                InitKind::Spectral => {
                    let mut icfg = InitConfig::new(cfg.r);
                    icfg.seed = derive_seed(cfg.seed, 4);
                    init_subspaces(&obs, &icfg)?
                }
            };
            let out = kron_altmin(&obs, &init, &altmin_cfg, Some(&truth))?;
            Ok((out.trace, out.stopped_early))
        }
        Algorithm::Standard => {
            let init = FactorEstimate::random(cfg.n, cfg.r, derive_seed(cfg.seed, 4));
            let out = standard_altmin(&obs, &init, &altmin_cfg, Some(&truth))?;
            Ok((out.trace, out.stopped_early))
        }
        Algorithm::Unfolding => {
            let out = unfolding_altmin(&obs, cfg.r, &altmin_cfg, Some(&truth))?;
            Ok((out.trace, out.stopped_early))
        }
    }
}

/// Parameters of the full exact-completion pipeline.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub rank: usize,
    /// Fractions of the observation probability spent on initialization
    /// and alternating minimization; the remainder goes to post-processing.
    pub frac_init: f64,
    pub frac_altmin: f64,
    pub k_rounds: usize,
    /// Use fresh independent splits for the altmin rounds (the analysis
    /// schedule); otherwise subsample half of the altmin split per round.
    pub fresh_splits: bool,
    pub tau: f64,
    pub box_bound: f64,
    pub refine: RefineOptions,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            frac_init: 0.35,
            frac_altmin: 0.45,
            k_rounds: 25,
            fresh_splits: false,
            tau: 10.0,
            box_bound: 1e-2,
            refine: RefineOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub estimate: CPDecomposition,
    pub triple: SubspaceTriple,
    pub altmin_trace: Vec<IterationStat>,
    pub jennrich_attempts: usize,
    pub refine_iterations: usize,
    pub hit_box_boundary: bool,
    pub post_wall_ms: f64,
}

/// Algorithm 1 end to end: split the sample three ways, spectrally
/// initialize on the first, run Kronecker rounds on the second, then
/// project / decompose / refine on the third.
pub fn exact_pipeline(
    obs: &ObservationSet,
    cfg: &PipelineConfig,
    truth: Option<&CPDecomposition>,
) -> Result<PipelineOutcome> {
    let p = obs.p();
    let p1 = cfg.frac_init * p;
    let p2 = cfg.frac_altmin * p;
    let p3 = p - p1 - p2;
    let p_prime = p2 / cfg.k_rounds as f64;
    let plan = SamplingPlan::new(p, p1, p2, p3, cfg.k_rounds, p_prime)?;

    let (t1, rest) = split(obs, plan.p1, plan.p2 + plan.p3, derive_seed(cfg.seed, 10))?;
    let (t2, t3) = split(&rest, plan.p2, plan.p3, derive_seed(cfg.seed, 11))?;

    let mut icfg = InitConfig::new(cfg.rank);
    icfg.tau = cfg.tau;
    icfg.seed = derive_seed(cfg.seed, 12);
    let init = init_subspaces(&t1, &icfg)?;

    let altmin_cfg = AltMinConfig {
        rank: cfg.rank,
        iters: cfg.k_rounds,
        schedule: if cfg.fresh_splits {
            Schedule::FreshSplits { p_prime: plan.p_prime }
        } else {
            Schedule::SubsampleHalf
        },
        ls_ridge: 1e-12,
        sequential: false,
        track_angles: truth.is_some(),
        stop_mse: None,
        seed: derive_seed(cfg.seed, 13),
    };
    let altmin_out = kron_altmin(&t2, &init, &altmin_cfg, truth)?;

    let post_start = std::time::Instant::now();
    let (t_minus, t_tilde) = split(&t3, plan.p3 / 2.0, plan.p3 / 2.0, derive_seed(cfg.seed, 14))?;
    let core = project_to_subspaces(&t_minus, &altmin_out.triple)?;
    let jen = jennrich_core(&core, cfg.rank, derive_seed(cfg.seed, 15))?;
    let poly = build_polytope(&jen.decomposition, cfg.box_bound)?;
    let mut refine_opts = cfg.refine.clone();
    refine_opts.seed = derive_seed(cfg.seed, 16);
    let refined = convex_refine(&t_tilde, &poly, &refine_opts)?;
    let post_wall_ms = post_start.elapsed().as_secs_f64() * 1e3;

    Ok(PipelineOutcome {
        estimate: refined.refined,
        triple: altmin_out.triple,
        altmin_trace: altmin_out.trace,
        jennrich_attempts: jen.attempts,
        refine_iterations: refined.iterations,
        hit_box_boundary: refined.hit_box_boundary,
        post_wall_ms,
    })
}

/// Grid description of a sweep.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub algorithms: Vec<Algorithm>,
    pub n_values: Vec<usize>,
    /// Explicit observation counts applied to every n.
    pub num_obs: Vec<usize>,
    /// Multipliers of n^{3/2}; merged with `num_obs` per n.
    pub obs_factors: Vec<f64>,
    pub r: usize,
    pub trials: usize,
    pub iters: usize,
    pub standard_iters: usize,
    pub threshold: f64,
    pub quota: f64,
    pub family: Family,
    pub noise_level: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            algorithms: vec![Algorithm::Kronecker],
            n_values: vec![50, 100, 200],
            num_obs: Vec::new(),
            obs_factors: vec![8.0, 11.3, 16.0, 22.6, 32.0, 45.0],
            r: 4,
            trials: 20,
            iters: 100,
            standard_iters: 400,
            threshold: 0.01,
            quota: 0.5,
            family: Family::Correlated,
            noise_level: 0.0,
            schedule: Schedule::SubsampleHalf,
            seed: 7,
        }
    }
}

impl SweepSpec {
    pub fn obs_counts_for(&self, n: usize) -> Vec<usize> {
        let mut counts: Vec<usize> = self.num_obs.clone();
        let scale = (n as f64).powf(1.5);
        counts.extend(self.obs_factors.iter().map(|f| (f * scale).round() as usize));
        counts.sort_unstable();
        counts.dedup();
        counts.retain(|&c| c > 0 && c <= n * n * n);
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() || self.n_values.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one algorithm and one n".into()));
        }
        if self.num_obs.is_empty() && self.obs_factors.is_empty() {
            return Err(Error::InvalidArgument("sweep needs num_obs or obs_factor values".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be positive".into()));
        }
        if !(self.quota > 0.0 && self.quota <= 1.0) {
            return Err(Error::InvalidArgument("quota must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Parse the key = value sweep file format (see README).
    pub fn parse(text: &str) -> Result<SweepSpec> {
        let mut spec = SweepSpec::default();
        let mut saw_obs = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse_err = |msg: String| Error::Parse { line: line_no, message: msg };
            let list_items = |v: &str| -> Result<Vec<String>> {
                let inner = v
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| parse_err(format!("expected a [list], got `{}`", v)))?;
                Ok(inner
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect())
            };
            match key {
                "algorithms" | "algorithm" => {
                    let items = if value.starts_with('[') { list_items(value)? } else { vec![value.to_string()] };
                    spec.algorithms = items
                        .iter()
                        .map(|s| Algorithm::from_str(s).map_err(|e| parse_err(e.to_string())))
                        .collect::<Result<_>>()?;
                }
                "n" => {
                    spec.n_values = list_items(value)?
                        .iter()
                        .map(|s| s.parse().map_err(|e| parse_err(format!("bad n `{}`: {}", s, e))))
                        .collect::<Result<_>>()?;
                }
                "num_obs" => {
                    saw_obs = true;
                    spec.obs_factors.clear();
                    spec.num_obs = list_items(value)?
                        .iter()
                        .map(|s| s.parse().map_err(|e| parse_err(format!("bad num_obs `{}`: {}", s, e))))
                        .collect::<Result<_>>()?;
                }
                "obs_factor" => {
                    if !saw_obs {
                        spec.num_obs.clear();
                    }
                    spec.obs_factors = list_items(value)?
                        .iter()
                        .map(|s| s.parse().map_err(|e| parse_err(format!("bad obs_factor `{}`: {}", s, e))))
                        .collect::<Result<_>>()?;
                }
                "r" => spec.r = value.parse().map_err(|e| parse_err(format!("bad r: {}", e)))?,
                "trials" => spec.trials = value.parse().map_err(|e| parse_err(format!("bad trials: {}", e)))?,
                "iters" => spec.iters = value.parse().map_err(|e| parse_err(format!("bad iters: {}", e)))?,
                "standard_iters" => {
                    spec.standard_iters = value.parse().map_err(|e| parse_err(format!("bad standard_iters: {}", e)))?
                }
                "threshold" => spec.threshold = value.parse().map_err(|e| parse_err(format!("bad threshold: {}", e)))?,
                "quota" => spec.quota = value.parse().map_err(|e| parse_err(format!("bad quota: {}", e)))?,
                "family" => spec.family = Family::from_str(value).map_err(|e| parse_err(e.to_string()))?,
                "noise" => spec.noise_level = value.parse().map_err(|e| parse_err(format!("bad noise: {}", e)))?,
                "schedule" => {
                    spec.schedule = match value {
                        "half" => Schedule::SubsampleHalf,
                        "full" => Schedule::Full,
                        other => return Err(parse_err(format!("unknown schedule `{}` (half|full)", other))),
                    }
                }
                "seed" => spec.seed = value.parse().map_err(|e| parse_err(format!("bad seed: {}", e)))?,
                other => return Err(parse_err(format!("unknown key `{}`", other))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub algorithm: String,
    pub n: usize,
    pub num_obs: usize,
    pub trials: usize,
    pub success_fraction: f64,
    pub success: bool,
    pub median_final_mse: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontierPoint {
    pub n: usize,
    pub min_successful_obs: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontierReport {
    pub algorithm: String,
    pub points: Vec<FrontierPoint>,
    /// Log-log slope of the success frontier across n, when at least two
    /// frontier points exist.
    pub slope: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub cells: Vec<CellReport>,
    pub frontiers: Vec<FrontierReport>,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

/// Median of a nonempty slice (average of the two central order statistics
/// for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(x, _)| x.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..points.len() {
        num += (xs[i] - xbar) * (ys[i] - ybar);
        den += (xs[i] - xbar) * (xs[i] - xbar);
    }
    (den > 0.0).then(|| num / den)
}

/// Run the whole grid. Trials run in parallel with per-trial derived
/// seeds; records come back in trial-id order.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepReport> {
    spec.validate()?;
    let mut configs = Vec::new();
    let mut trial_id = 0u64;
    for &algorithm in &spec.algorithms {
        for &n in &spec.n_values {
            for num_obs in spec.obs_counts_for(n) {
                for _ in 0..spec.trials {
                    let mut cfg = TrialConfig::new(algorithm, spec.family, n, spec.r, num_obs, 0);
                    cfg.trial_id = trial_id;
                    cfg.seed = derive_seed(spec.seed, trial_id);
                    cfg.noise_level = spec.noise_level;
                    cfg.iters = if algorithm == Algorithm::Standard { spec.standard_iters } else { spec.iters };
                    cfg.schedule = spec.schedule;
                    cfg.stop_mse = Some(spec.threshold * 0.1);
                    configs.push(cfg);
                    trial_id += 1;
                }
            }
        }
    }

    let records: Vec<TrialRecord> = configs.par_iter().map(run_trial).collect();

    let mut cells = Vec::new();
    let mut idx = 0usize;
    for &algorithm in &spec.algorithms {
        for &n in &spec.n_values {
            for num_obs in spec.obs_counts_for(n) {
                let cell_records = &records[idx..idx + spec.trials];
                idx += spec.trials;
                let finals: Vec<f64> = cell_records.iter().filter_map(|r| r.final_mse()).collect();
                let successes = cell_records
                    .iter()
                    .filter(|r| r.final_mse().map(|m| m < spec.threshold).unwrap_or(false))
                    .count();
                let fraction = successes as f64 / spec.trials as f64;
                cells.push(CellReport {
                    algorithm: algorithm.to_string(),
                    n,
                    num_obs,
                    trials: spec.trials,
                    success_fraction: fraction,
                    success: fraction >= spec.quota,
                    median_final_mse: median(&finals),
                });
            }
        }
    }

    let mut frontiers = Vec::new();
    for &algorithm in &spec.algorithms {
        let mut points = Vec::new();
        for &n in &spec.n_values {
            let min_obs = cells
                .iter()
                .filter(|c| c.algorithm == algorithm.to_string() && c.n == n && c.success)
                .map(|c| c.num_obs)
                .min();
            points.push(FrontierPoint { n, min_successful_obs: min_obs });
        }
        let fitted: Vec<(f64, f64)> = points
            .iter()
            .filter_map(|p| p.min_successful_obs.map(|o| (p.n as f64, o as f64)))
            .collect();
        frontiers.push(FrontierReport {
            algorithm: algorithm.to_string(),
            points,
            slope: loglog_slope(&fitted),
        });
    }

    Ok(SweepReport { cells, frontiers, records })
}

pub const CSV_HEADER: &str =
    "trial_id,algorithm,n,r,num_obs,noise_level,seed,iteration,normalized_mse,max_angle,wall_time_ms,status";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.16e}", x)).unwrap_or_default()
}

/// Render records to the CSV schema; one line per tracked iteration.
pub fn csv_string(records: &[TrialRecord]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for rec in records {
        let status = rec.status.label();
        for stat in &rec.iterations {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{:.3},{}",
                rec.trial_id,
                rec.algorithm,
                rec.n,
                rec.r,
                rec.num_obs,
                rec.noise_level,
                rec.seed,
                stat.iteration,
                fmt_opt(stat.normalized_mse),
                fmt_opt(stat.max_angle),
                stat.wall_time_ms,
                status
            )
            .expect("string write");
        }
    }
    out
}

pub fn emit_csv(records: &[TrialRecord], path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(records))?;
    Ok(())
}

/// Hash of the CSV contents with the wall-time column blanked; identical
/// configs and seeds must produce identical hashes.
pub fn determinism_hash(records: &[TrialRecord]) -> u64 {
    let csv = csv_string(records);
    let mut hasher = DefaultHasher::new();
    for line in csv.lines() {
        let fields: Vec<&str> = line.split(',').collect();
        for (i, f) in fields.iter().enumerate() {
            if i != 10 {
                f.hash(&mut hasher);
            }
        }
    }
    hasher.finish()
}

pub fn emit_json(report: &SweepReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::SolverFailure(format!("json serialization: {}", e)))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Parse a CSV produced by [`emit_csv`] back into (trial_id, iteration,
/// normalized_mse) triples, for round-trip checks.
pub fn parse_csv_mse(text: &str) -> Result<Vec<(u64, usize, Option<f64>)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line != CSV_HEADER {
                return Err(Error::Parse { line: 1, message: "unexpected CSV header".into() });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 12 {
            return Err(Error::Parse { line: idx + 1, message: format!("expected 12 fields, got {}", fields.len()) });
        }
        let trial: u64 = fields[0]
            .parse()
            .map_err(|e| Error::Parse { line: idx + 1, message: format!("bad trial_id: {}", e) })?;
        let iter: usize = fields[7]
            .parse()
            .map_err(|e| Error::Parse { line: idx + 1, message: format!("bad iteration: {}", e) })?;
        let mse = if fields[8].is_empty() {
            None
        } else {
            Some(fields[8].parse().map_err(|e| Error::Parse {
                line: idx + 1,
                message: format!("bad normalized_mse: {}", e),
            })?)
        };
        out.push((trial, iter, mse));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iteration_trial_records_init_error() {
        let mut cfg = TrialConfig::new(Algorithm::Kronecker, Family::Uncorrelated, 12, 2, 800, 3);
        cfg.iters = 0;
        let record = run_trial(&cfg);
        assert_eq!(record.iterations.len(), 1);
        let mse = record.iterations[0].normalized_mse.unwrap();
        assert!(mse > 0.1, "random init should start far away, got {}", mse);
    }

    #[test]
    fn trial_is_deterministic_modulo_walltime() {
        let cfg = {
            let mut c = TrialConfig::new(Algorithm::Kronecker, Family::Correlated, 14, 2, 1200, 9);
            c.iters = 3;
            c
        };
        let a = run_trial(&cfg);
        let b = run_trial(&cfg);
        assert_eq!(determinism_hash(&[a]), determinism_hash(&[b]));
    }

    #[test]
    fn csv_shape_and_round_trip() {
        let empty: Vec<TrialRecord> = vec![];
        assert_eq!(csv_string(&empty), format!("{}\n", CSV_HEADER));

        let rec = TrialRecord {
            trial_id: 1,
            algorithm: "kronecker".into(),
            n: 5,
            r: 2,
            num_obs: 10,
            noise_level: 0.1,
            seed: 3,
            iterations: vec![
                IterationStat { iteration: 0, normalized_mse: Some(0.5), max_angle: None, wall_time_ms: 0.0 },
                IterationStat {
                    iteration: 1,
                    normalized_mse: Some(0.123456789012345678),
                    max_angle: Some(0.25),
                    wall_time_ms: 1.5,
                },
            ],
            status: TrialStatus::Completed,
        };
        let csv = csv_string(&[rec]);
        assert_eq!(csv.lines().count(), 3);
        let parsed = parse_csv_mse(&csv).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].2.unwrap(), 0.123456789012345678);
    }

    #[test]
    fn median_matches_naive_reimplementation() {
        let naive = |xs: &[f64]| -> f64 {
            // count-below definition for odd, midpoint average for even
            let mut v = xs.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
            }
        };
        let cases = [vec![3.0, 1.0, 2.0], vec![4.0, 1.0, 3.0, 2.0], vec![7.5]];
        for case in cases {
            assert_eq!(median(&case).unwrap(), naive(&case));
        }
        assert!(median(&[]).is_none());
    }

    #[test]
    fn sweep_spec_parses_and_validates() {
        let text = "\
# sample sweep
algorithms = [kronecker, standard]
n = [20, 30]
obs_factor = [10, 20]
r = 2
trials = 3
iters = 5
threshold = 0.05
quota = 0.5
family = uncorrelated
seed = 11
";
        let spec = SweepSpec::parse(text).unwrap();
        assert_eq!(spec.algorithms, vec![Algorithm::Kronecker, Algorithm::Standard]);
        assert_eq!(spec.n_values, vec![20, 30]);
        assert_eq!(spec.r, 2);
        assert_eq!(spec.obs_counts_for(20).len(), 2);

        let bad = SweepSpec::parse("nonsense = 4\n");
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn single_cell_sweep_reduces_to_trials() {
        let spec = SweepSpec {
            algorithms: vec![Algorithm::Standard],
            n_values: vec![10],
            num_obs: vec![400],
            obs_factors: vec![],
            r: 2,
            trials: 2,
            iters: 3,
            standard_iters: 3,
            threshold: 0.5,
            quota: 0.5,
            family: Family::Uncorrelated,
            noise_level: 0.0,
            schedule: Schedule::SubsampleHalf,
            seed: 5,
        };
        let report = run_sweep(&spec).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.records.len(), 2);
        let cell = &report.cells[0];
        assert_eq!(cell.trials, 2);
        assert!(cell.median_final_mse.is_some());
    }
}
