//! Alternating minimization: the Kronecker subspace variant, the standard
//! factor-wise variant, and the matrix-completion-on-unfolding baseline.
//!
//! Every round solves one ridge-stabilized least squares problem per row of
//! the mode unfolding, touching only observed columns. The Kronecker
//! variant carries orthonormal subspace estimates and compresses the
//! `n x r^2` coefficient matrix back to rank r through its top left
//! singular subspace; the standard variant carries factor matrices and its
//! row basis is the Khatri-Rao product of the other two factors.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{khatri_rao, top_r_left_singular_basis, PowerConfig};
use crate::postprocess::project_to_subspaces;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampling::{split_k, ObservationSet};
use crate::subspace::{SubspaceBasis, SubspaceTriple};
use crate::tensor::{normalized_mse_cp, CPDecomposition, Mode};

/// Which observations each round sees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// Split the input once into `iters` independent Bernoulli(p') samples.
    FreshSplits { p_prime: f64 },
    /// A fresh uniformly random half of the support every round.
    SubsampleHalf,
    /// All observations every round.
    Full,
}

#[derive(Debug, Clone)]
pub struct AltMinConfig {
    pub rank: usize,
    pub iters: usize,
    pub schedule: Schedule,
    /// Relative ridge added to the per-row normal equations.
    pub ls_ridge: f64,
    /// Update all modes from the previous round's estimates (false, the
    /// default) or sweep sequentially within a round (true).
    pub sequential: bool,
    pub track_angles: bool,
    /// Stop once the tracked normalized MSE falls below this.
    pub stop_mse: Option<f64>,
    pub seed: u64,
}

impl AltMinConfig {
    pub fn new(rank: usize, iters: usize) -> Self {
        Self {
            rank,
            iters,
            schedule: Schedule::SubsampleHalf,
            ls_ridge: 1e-12,
            sequential: false,
            track_angles: false,
            stop_mse: None,
            seed: 0,
        }
    }
}

/// Iteration count suggested by the convergence analysis,
/// `ceil(100 * log(n * sigma_1 / (c * sigma_r)))`.
pub fn theory_iteration_count(n: usize, sigma_1: f64, sigma_r: f64, c: f64) -> usize {
    (100.0 * (n as f64 * sigma_1 / (c * sigma_r)).ln()).ceil() as usize
}

/// One row's least-squares solution over the observed columns.
#[derive(Debug, Clone)]
pub struct RowSolve {
    pub coeffs: DVector<f64>,
    pub observed: usize,
    /// Set when the row had fewer observations than unknowns, so the ridge
    /// determined the solution rather than merely stabilizing it.
    pub regularized: bool,
}

/// Minimize `||values - coeffs^T basis||_2^2` where `basis` is
/// `dim x observed` (one column per observed position), via the normal
/// equations with a relative ridge. Never fails: rank-deficient systems
/// get the minimum-norm-biased ridge solution.
pub fn solve_row(values: &[f64], basis: &DMatrix<f64>, ridge_rel: f64) -> RowSolve {
    let dim = basis.nrows();
    let m = basis.ncols();
    debug_assert_eq!(m, values.len());
    if m == 0 {
        return RowSolve { coeffs: DVector::zeros(dim), observed: 0, regularized: true };
    }
    let mut gram = basis * basis.transpose();
    let rhs = basis * DVector::from_column_slice(values);
    let trace = gram.trace();
    if !(trace > 0.0) {
        return RowSolve { coeffs: DVector::zeros(dim), observed: m, regularized: true };
    }
    let ridge = ridge_rel * trace / dim as f64;
    for i in 0..dim {
        gram[(i, i)] += ridge;
    }
    let coeffs = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| DVector::zeros(dim)),
    };
    RowSolve { coeffs, observed: m, regularized: m < dim }
}

/// Per-step accounting of problematic rows.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepDiagnostics {
    pub zero_obs_rows: usize,
    pub regularized_rows: usize,
}

/// One tracked round of any of the algorithms.
#[derive(Debug, Clone, serde::Serialize)]
pub struct IterationStat {
    pub iteration: usize,
    pub normalized_mse: Option<f64>,
    pub max_angle: Option<f64>,
    pub wall_time_ms: f64,
}

fn bucket_by_mode_row(obs: &ObservationSet, mode: Mode, n: usize) -> Vec<Vec<(u32, u32, f64)>> {
    let mut buckets: Vec<Vec<(u32, u32, f64)>> = vec![Vec::new(); n];
    for e in obs.entries() {
        let (row, c1, c2) = mode.permute(e.i as usize, e.j as usize, e.k as usize);
        buckets[row].push((c1 as u32, c2 as u32, e.value));
    }
    buckets
}

/// Solve all row problems for one mode and stack the coefficient matrix.
/// `basis_col` fills the `dim` basis values of one observed position.
fn solve_rows<F>(buckets: &[Vec<(u32, u32, f64)>], dim: usize, ridge_rel: f64, basis_col: F) -> (DMatrix<f64>, StepDiagnostics)
where
    F: Fn(u32, u32, &mut [f64]),
{
    let n = buckets.len();
    let mut h = DMatrix::zeros(n, dim);
    let mut diag = StepDiagnostics::default();
    let mut basis = DMatrix::<f64>::zeros(dim, 0);
    let mut values: Vec<f64> = Vec::new();
    let mut col = vec![0.0; dim];
    for (row, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            diag.zero_obs_rows += 1;
            continue;
        }
        let m = bucket.len();
        basis.resize_mut(dim, m, 0.0);
        values.clear();
        for (t, &(c1, c2, v)) in bucket.iter().enumerate() {
            basis_col(c1, c2, &mut col);
            basis.column_mut(t).copy_from_slice(&col);
            values.push(v);
        }
        let solved = solve_row(&values, &basis, ridge_rel);
        if solved.regularized {
            diag.regularized_rows += 1;
        }
        h.row_mut(row).copy_from_slice(solved.coeffs.as_slice());
    }
    (h, diag)
}

/// One Kronecker round for one mode: per-row least squares against the
/// orthonormal basis of the tensor product of the other two subspaces,
/// then the top-r left singular subspace of the stacked coefficients.
pub fn kron_step(
    obs: &ObservationSet,
    triple: &SubspaceTriple,
    mode: Mode,
    cfg: &AltMinConfig,
) -> Result<(SubspaceBasis, StepDiagnostics)> {
    if obs.is_empty() {
        return Err(Error::InvalidArgument("kron_step needs a nonempty observation set".into()));
    }
    let n = triple.n();
    let r = triple.r();
    let (a_mat, b_mat) = match mode {
        Mode::X => (triple.vy().matrix(), triple.vz().matrix()),
        Mode::Y => (triple.vz().matrix(), triple.vx().matrix()),
        Mode::Z => (triple.vx().matrix(), triple.vy().matrix()),
    };
    let buckets = bucket_by_mode_row(obs, mode, n);
    let dim = r * r;
    let (h, diag) = solve_rows(&buckets, dim, cfg.ls_ridge, |c1, c2, out| {
        for a in 0..r {
            let av = a_mat[(c1 as usize, a)];
            for b in 0..r {
                out[a * r + b] = av * b_mat[(c2 as usize, b)];
            }
        }
    });
    let basis = top_r_left_singular_basis(&h, r, &PowerConfig { seed: derive_seed(cfg.seed, 17), ..Default::default() })?;
    Ok((basis, diag))
}

/// Result of a full Kronecker alternating minimization run.
#[derive(Debug, Clone)]
pub struct KronOutcome {
    pub triple: SubspaceTriple,
    pub trace: Vec<IterationStat>,
    pub degenerate_rounds: usize,
    pub zero_obs_rows: usize,
    pub regularized_rows: usize,
    pub stopped_early: bool,
}

fn round_observations(
    obs: &ObservationSet,
    schedule: Schedule,
    splits: &Option<Vec<ObservationSet>>,
    round: usize,
    seed: u64,
) -> ObservationSet {
    match schedule {
        Schedule::FreshSplits { .. } => splits.as_ref().expect("splits prepared")[round].clone(),
        Schedule::SubsampleHalf => obs.subsample_half(derive_seed(seed, 0x4a1f + round as u64)),
        Schedule::Full => obs.clone(),
    }
}

/// Run `iters` Kronecker rounds. All three modes are refreshed from the
/// previous round's triple unless `sequential` is set. When `truth` is
/// given the trace records, per round, the normalized MSE of the projected
/// estimate and (optionally) the largest principal angle to the true spans.
pub fn kron_altmin(
    obs: &ObservationSet,
    init: &SubspaceTriple,
    cfg: &AltMinConfig,
    truth: Option<&CPDecomposition>,
) -> Result<KronOutcome> {
    let splits = match cfg.schedule {
        Schedule::FreshSplits { p_prime } => Some(split_k(obs, cfg.iters.max(1), p_prime, derive_seed(cfg.seed, 0x511))?),
        _ => None,
    };
    let truth_spans = truth.map(|t| t.spans()).transpose()?;

    let mut triple = init.clone();
    let mut outcome = KronOutcome {
        triple: init.clone(),
        trace: Vec::with_capacity(cfg.iters + 1),
        degenerate_rounds: 0,
        zero_obs_rows: 0,
        regularized_rows: 0,
        stopped_early: false,
    };

    let record = |iteration: usize, triple: &SubspaceTriple, elapsed_ms: f64, outcome: &mut KronOutcome| -> Option<f64> {
        let mse = truth.and_then(|t| {
            let core = project_to_subspaces(obs, triple).ok()?;
            core.normalized_mse_vs(t).ok()
        });
        let max_angle = match (&truth_spans, cfg.track_angles) {
            (Some(spans), true) => triple.max_angle_to(spans).ok(),
            _ => None,
        };
        outcome.trace.push(IterationStat { iteration, normalized_mse: mse, max_angle, wall_time_ms: elapsed_ms });
        mse
    };

    record(0, &triple, 0.0, &mut outcome);
    for round in 0..cfg.iters {
        let start = Instant::now();
        let round_obs = round_observations(obs, cfg.schedule, &splits, round, cfg.seed);
        let mut next = triple.clone();
        let mut failed = false;
        for mode in Mode::ALL {
            let source = if cfg.sequential { &next } else { &triple };
            match kron_step(&round_obs, source, mode, cfg) {
                Ok((basis, diag)) => {
                    outcome.zero_obs_rows += diag.zero_obs_rows;
                    outcome.regularized_rows += diag.regularized_rows;
                    next.replace(mode, basis);
                }
                Err(_) => failed = true,
            }
        }
        if failed {
            outcome.degenerate_rounds += 1;
        }
        triple = next;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let mse = record(round + 1, &triple, elapsed, &mut outcome);
        if let (Some(stop), Some(m)) = (cfg.stop_mse, mse) {
            if m < stop {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    outcome.triple = triple;
    Ok(outcome)
}

/// Factor-matrix estimate carried by the standard variant.
#[derive(Debug, Clone)]
pub struct FactorEstimate {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl FactorEstimate {
    /// Random unit columns for all three modes.
    pub fn random(n: usize, r: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut gen_factor = || {
            let mut m = DMatrix::from_fn(n, r, |_, _| {
                rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
            });
            for c in 0..r {
                let norm = m.column(c).norm();
                m.column_mut(c).scale_mut(1.0 / norm);
            }
            m
        };
        let x = gen_factor();
        let y = gen_factor();
        let z = gen_factor();
        Self { x, y, z }
    }

    pub fn get(&self, mode: Mode) -> &DMatrix<f64> {
        match mode {
            Mode::X => &self.x,
            Mode::Y => &self.y,
            Mode::Z => &self.z,
        }
    }

    fn set(&mut self, mode: Mode, m: DMatrix<f64>) {
        match mode {
            Mode::X => self.x = m,
            Mode::Y => self.y = m,
            Mode::Z => self.z = m,
        }
    }

    /// The estimate `sum_i x_i ⊗ y_i ⊗ z_i` as a CP decomposition.
    pub fn to_cp(&self) -> Result<CPDecomposition> {
        let r = self.x.ncols();
        CPDecomposition::from_components(vec![1.0; r], self.x.clone(), self.y.clone(), self.z.clone())
    }
}

/// One standard round for one mode: per-row least squares over the r
/// Khatri-Rao columns of the other two factor matrices.
pub fn standard_step(
    obs: &ObservationSet,
    factors: &FactorEstimate,
    mode: Mode,
    cfg: &AltMinConfig,
) -> Result<(DMatrix<f64>, StepDiagnostics)> {
    if obs.is_empty() {
        return Err(Error::InvalidArgument("standard_step needs a nonempty observation set".into()));
    }
    let n = factors.x.nrows();
    let r = factors.x.ncols();
    let (a_mat, b_mat) = match mode {
        Mode::X => (&factors.y, &factors.z),
        Mode::Y => (&factors.z, &factors.x),
        Mode::Z => (&factors.x, &factors.y),
    };
    let buckets = bucket_by_mode_row(obs, mode, n);
    let (h, diag) = solve_rows(&buckets, r, cfg.ls_ridge, |c1, c2, out| {
        for t in 0..r {
            out[t] = a_mat[(c1 as usize, t)] * b_mat[(c2 as usize, t)];
        }
    });
    Ok((h, diag))
}

/// Result of a standard alternating minimization run.
#[derive(Debug, Clone)]
pub struct StandardOutcome {
    pub factors: FactorEstimate,
    pub trace: Vec<IterationStat>,
    pub degenerate_rounds: usize,
    pub zero_obs_rows: usize,
    pub regularized_rows: usize,
    pub stopped_early: bool,
}

pub fn standard_altmin(
    obs: &ObservationSet,
    init: &FactorEstimate,
    cfg: &AltMinConfig,
    truth: Option<&CPDecomposition>,
) -> Result<StandardOutcome> {
    let splits = match cfg.schedule {
        Schedule::FreshSplits { p_prime } => Some(split_k(obs, cfg.iters.max(1), p_prime, derive_seed(cfg.seed, 0x512))?),
        _ => None,
    };
    let truth_spans = truth.map(|t| t.spans()).transpose()?;

    let mut factors = init.clone();
    let mut outcome = StandardOutcome {
        factors: init.clone(),
        trace: Vec::with_capacity(cfg.iters + 1),
        degenerate_rounds: 0,
        zero_obs_rows: 0,
        regularized_rows: 0,
        stopped_early: false,
    };

    let record = |iteration: usize, factors: &FactorEstimate, elapsed_ms: f64, outcome: &mut StandardOutcome, track: bool| -> Option<f64> {
        let est = factors.to_cp().ok();
        let mse = match (&est, truth) {
            (Some(est), Some(t)) => normalized_mse_cp(est, t).ok(),
            _ => None,
        };
        let max_angle = match (&truth_spans, track, &est) {
            (Some(spans), true, Some(est)) => est.spans().ok().and_then(|s| s.max_angle_to(spans).ok()),
            _ => None,
        };
        outcome.trace.push(IterationStat { iteration, normalized_mse: mse, max_angle, wall_time_ms: elapsed_ms });
        mse
    };

    record(0, &factors, 0.0, &mut outcome, cfg.track_angles);
    for round in 0..cfg.iters {
        let start = Instant::now();
        let round_obs = round_observations(obs, cfg.schedule, &splits, round, cfg.seed);
        let mut next = factors.clone();
        let mut failed = false;
        for mode in Mode::ALL {
            let source = if cfg.sequential { &next } else { &factors };
            match standard_step(&round_obs, source, mode, cfg) {
                Ok((h, diag)) => {
                    outcome.zero_obs_rows += diag.zero_obs_rows;
                    outcome.regularized_rows += diag.regularized_rows;
                    next.set(mode, h);
                }
                Err(_) => failed = true,
            }
        }
        if failed {
            outcome.degenerate_rounds += 1;
        }
        factors = next;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let mse = record(round + 1, &factors, elapsed, &mut outcome, cfg.track_angles);
        if let (Some(stop), Some(m)) = (cfg.stop_mse, mse) {
            if m < stop {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    outcome.factors = factors;
    Ok(outcome)
}

/// Matrix-completion baseline: alternating least squares for a rank-r
/// factorization `A W^T` of the mode-x unfolding, treated as an
/// `n x n^2` matrix completion problem.
#[derive(Debug, Clone)]
pub struct UnfoldingOutcome {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    pub trace: Vec<IterationStat>,
    pub zero_obs_rows: usize,
    pub stopped_early: bool,
}

pub fn unfolding_altmin(
    obs: &ObservationSet,
    rank: usize,
    cfg: &AltMinConfig,
    truth: Option<&CPDecomposition>,
) -> Result<UnfoldingOutcome> {
    let (n, n2, n3) = obs.dims();
    if n != n2 || n != n3 {
        return Err(Error::Dimension("unfolding baseline expects cubic dims".into()));
    }
    let cols = n * n;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x0f01d));
    let mut sample_matrix = |rows: usize| {
        let mut m = DMatrix::from_fn(rows, rank, |_, _| {
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
        });
        for c in 0..rank {
            let norm = m.column(c).norm();
            m.column_mut(c).scale_mut(1.0 / norm);
        }
        m
    };
    let mut left = sample_matrix(n);
    let mut right = sample_matrix(cols);

    // truth cross products for factored MSE: U_x = M_x D N^T, N = KR(Y, Z)
    let truth_parts = match truth {
        Some(t) => {
            let kr = khatri_rao(t.factor(Mode::Y), t.factor(Mode::Z))?;
            let norm = t.frobenius_norm();
            Some((t, kr, norm))
        }
        None => None,
    };
    let mse_of = |left: &DMatrix<f64>, right: &DMatrix<f64>| -> Option<f64> {
        let (t, kr, tnorm) = truth_parts.as_ref()?;
        let est_sq = ((left.transpose() * left) * (right.transpose() * right)).trace();
        let k = left.transpose() * t.factor(Mode::X); // r x rt
        let m = kr.transpose() * right; // rt x r
        let mut cross = 0.0;
        for a in 0..rank {
            for b in 0..t.rank() {
                cross += k[(a, b)] * t.sigmas()[b] * m[(b, a)];
            }
        }
        let diff_sq = (est_sq - 2.0 * cross + tnorm * tnorm).max(0.0);
        Some(diff_sq.sqrt() / tnorm)
    };

    let mut outcome = UnfoldingOutcome {
        left: left.clone(),
        right: right.clone(),
        trace: Vec::with_capacity(cfg.iters + 1),
        zero_obs_rows: 0,
        stopped_early: false,
    };
    outcome.trace.push(IterationStat {
        iteration: 0,
        normalized_mse: mse_of(&left, &right),
        max_angle: None,
        wall_time_ms: 0.0,
    });

    for round in 0..cfg.iters {
        let start = Instant::now();
        let round_obs = match cfg.schedule {
            Schedule::SubsampleHalf => obs.subsample_half(derive_seed(cfg.seed, 0x0f02d + round as u64)),
            _ => obs.clone(),
        };
        // rows of the unfolding, then columns, Gauss-Seidel style
        let mut row_buckets: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        let mut col_buckets: Vec<Vec<(u32, f64)>> = vec![Vec::new(); cols];
        for e in round_obs.entries() {
            let col = e.j as usize * n + e.k as usize;
            row_buckets[e.i as usize].push((col as u32, e.value));
            col_buckets[col].push((e.i, e.value));
        }
        let solve_side = |buckets: &Vec<Vec<(u32, f64)>>, basis_src: &DMatrix<f64>, zero_rows: &mut usize| {
            let mut h = DMatrix::zeros(buckets.len(), rank);
            let mut basis = DMatrix::<f64>::zeros(rank, 0);
            let mut values = Vec::new();
            for (row, bucket) in buckets.iter().enumerate() {
                if bucket.is_empty() {
                    *zero_rows += 1;
                    continue;
                }
                basis.resize_mut(rank, bucket.len(), 0.0);
                values.clear();
                for (t, &(pos, v)) in bucket.iter().enumerate() {
                    for c in 0..rank {
                        basis[(c, t)] = basis_src[(pos as usize, c)];
                    }
                    values.push(v);
                }
                let solved = solve_row(&values, &basis, cfg.ls_ridge);
                h.row_mut(row).copy_from_slice(solved.coeffs.as_slice());
            }
            h
        };
        let mut zero_rows = 0usize;
        left = solve_side(&row_buckets, &right, &mut zero_rows);
        right = solve_side(&col_buckets, &left, &mut zero_rows);
        outcome.zero_obs_rows += zero_rows;

        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let mse = mse_of(&left, &right);
        outcome.trace.push(IterationStat {
            iteration: round + 1,
            normalized_mse: mse,
            max_angle: None,
            wall_time_ms: elapsed,
        });
        if let (Some(stop), Some(m)) = (cfg.stop_mse, mse) {
            if m < stop {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    outcome.left = left;
    outcome.right = right;
    Ok(outcome)
}

/// Residual matrix `E = H - U_x B_t^T` of one Kronecker row-solve step at
/// full precision, for diagnostics on small instances.
pub fn kron_residual_norm(
    obs: &ObservationSet,
    truth: &CPDecomposition,
    triple: &SubspaceTriple,
    mode: Mode,
    cfg: &AltMinConfig,
) -> Result<f64> {
    let n = triple.n();
    let r = triple.r();
    let (a_mat, b_mat) = match mode {
        Mode::X => (triple.vy().matrix(), triple.vz().matrix()),
        Mode::Y => (triple.vz().matrix(), triple.vx().matrix()),
        Mode::Z => (triple.vx().matrix(), triple.vy().matrix()),
    };
    let buckets = bucket_by_mode_row(obs, mode, n);
    let dim = r * r;
    let (h, _) = solve_rows(&buckets, dim, cfg.ls_ridge, |c1, c2, out| {
        for a in 0..r {
            let av = a_mat[(c1 as usize, a)];
            for b in 0..r {
                out[a * r + b] = av * b_mat[(c2 as usize, b)];
            }
        }
    });
    // U_x B_t^T without materializing the unfolding: with U = M D N^T and
    // B_t = (A ⊗ B)^T, the product is M D (A^T Ya ∘ B^T Yb)-style column mix
    let unf = truth.unfold(mode);
    let ga = unf.right_a.transpose() * a_mat; // rt x r
    let gb = unf.right_b.transpose() * b_mat; // rt x r
    let rt = truth.rank();
    let mut mix = DMatrix::zeros(rt, dim);
    for t in 0..rt {
        for a in 0..r {
            for b in 0..r {
                mix[(t, a * r + b)] = unf.sigmas[t] * ga[(t, a)] * gb[(t, b)];
            }
        }
    }
    let exact = unf.left * mix; // n x r^2
    Ok((h - exact).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::sampling::sample;
    use crate::subspace::principal_angle_sine;
    use crate::synthetic::gen_uncorrelated;

    #[test]
    fn solve_row_full_observation_is_projection() {
        // orthonormal full basis: coefficients are exact inner products
        let triple = SubspaceTriple::random(4, 2, 1).unwrap();
        let a = triple.vx().matrix();
        let b = triple.vy().matrix();
        let n = 4;
        let r = 2;
        let dim = r * r;
        let mut basis = DMatrix::zeros(dim, n * n);
        for c1 in 0..n {
            for c2 in 0..n {
                for s in 0..r {
                    for t in 0..r {
                        basis[(s * r + t, c1 * n + c2)] = a[(c1, s)] * b[(c2, t)];
                    }
                }
            }
        }
        let mut rng = rng_from_seed(5);
        let u: Vec<f64> = (0..n * n).map(|_| rand::Rng::gen::<f64>(&mut rng) - 0.5).collect();
        let solved = solve_row(&u, &basis, 1e-12);
        let expect = &basis * DVector::from_column_slice(&u);
        assert!((solved.coeffs - expect).norm() < 1e-9);
        assert!(!solved.regularized);
    }

    #[test]
    fn solve_row_scalar_case() {
        let basis = DMatrix::from_column_slice(1, 1, &[2.0]);
        let solved = solve_row(&[3.0], &basis, 0.0);
        assert!((solved.coeffs[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn solve_row_matches_pseudoinverse_oracle() {
        let mut rng = rng_from_seed(77);
        for _ in 0..20 {
            let basis = DMatrix::from_fn(9, 40, |_, _| rand::Rng::gen::<f64>(&mut rng) - 0.5);
            let values: Vec<f64> = (0..40).map(|_| rand::Rng::gen::<f64>(&mut rng) - 0.5).collect();
            let solved = solve_row(&values, &basis, 1e-14);
            let pinv = basis.transpose().pseudo_inverse(1e-13).unwrap();
            let oracle = pinv * DVector::from_column_slice(&values);
            let rel = (&solved.coeffs - &oracle).norm() / oracle.norm();
            assert!(rel < 1e-8, "relative error {}", rel);
        }
    }

    #[test]
    fn kron_step_fixed_point_at_full_observation() {
        let cp = gen_uncorrelated(12, 2, 3).unwrap();
        let obs = sample(&cp, 1.0, 0).unwrap();
        let spans = cp.spans().unwrap();
        let cfg = AltMinConfig::new(2, 1);
        for mode in Mode::ALL {
            let (basis, diag) = kron_step(&obs, &spans, mode, &cfg).unwrap();
            let angle = principal_angle_sine(&basis, spans.get(mode)).unwrap();
            assert!(angle < 1e-8, "angle {} for mode {}", angle, mode);
            assert_eq!(diag.zero_obs_rows, 0);
        }
    }

    #[test]
    fn kron_step_invariant_under_basis_rotation() {
        let cp = gen_uncorrelated(20, 2, 9).unwrap();
        let obs = sample(&cp, 0.5, 10).unwrap();
        let spans = cp.spans().unwrap();
        let cfg = AltMinConfig::new(2, 1);
        let (base, _) = kron_step(&obs, &spans, Mode::X, &cfg).unwrap();

        // rotate the input bases: same spans, different matrices
        let rot = |b: &SubspaceBasis, seed: u64| {
            let mut rng = rng_from_seed(seed);
            let g = DMatrix::from_fn(2, 2, |_, _| rand::Rng::gen::<f64>(&mut rng) - 0.5);
            let q = g.qr().q();
            SubspaceBasis::new(b.matrix() * q).unwrap()
        };
        let rotated = SubspaceTriple::new(
            rot(spans.vx(), 1),
            rot(spans.vy(), 2),
            rot(spans.vz(), 3),
        )
        .unwrap();
        let (after, _) = kron_step(&obs, &rotated, Mode::X, &cfg).unwrap();
        let angle = principal_angle_sine(&base, &after).unwrap();
        assert!(angle < 1e-8, "angle {}", angle);
    }

    #[test]
    fn kron_altmin_zero_rounds_returns_init() {
        let cp = gen_uncorrelated(10, 2, 13).unwrap();
        let obs = sample(&cp, 0.5, 14).unwrap();
        let init = SubspaceTriple::random(10, 2, 15).unwrap();
        let cfg = AltMinConfig { iters: 0, ..AltMinConfig::new(2, 0) };
        let out = kron_altmin(&obs, &init, &cfg, Some(&cp)).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert!(out.triple.max_angle_to(&init).unwrap() < 1e-14);
    }

    #[test]
    fn standard_fixed_point_at_full_observation() {
        let cp = gen_uncorrelated(10, 2, 23).unwrap();
        let obs = sample(&cp, 1.0, 0).unwrap();
        let init = FactorEstimate {
            x: cp.factor(Mode::X).clone(),
            y: cp.factor(Mode::Y).clone(),
            z: cp.factor(Mode::Z).clone(),
        };
        let mut cfg = AltMinConfig::new(2, 1);
        cfg.schedule = Schedule::Full;
        let out = standard_altmin(&obs, &init, &cfg, Some(&cp)).unwrap();
        let final_mse = out.trace.last().unwrap().normalized_mse.unwrap();
        assert!(final_mse < 1e-10, "mse {}", final_mse);
    }

    #[test]
    fn fresh_splits_budget_enforced() {
        let cp = gen_uncorrelated(8, 2, 33).unwrap();
        let obs = sample(&cp, 0.2, 34).unwrap();
        let init = SubspaceTriple::random(8, 2, 35).unwrap();
        let cfg = AltMinConfig {
            schedule: Schedule::FreshSplits { p_prime: 0.1 },
            ..AltMinConfig::new(2, 5)
        };
        assert!(matches!(kron_altmin(&obs, &init, &cfg, None), Err(Error::Budget(_))));
    }
}
