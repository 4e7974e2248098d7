//! Tensor decomposition by simultaneous diagonalization: eigendecompose
//! two random contractions whose eigenvalue lists are reciprocal up to
//! matching, then solve for the third-mode components. Works whenever the
//! rank-1 component fibers are linearly independent; eigenvalue collisions
//! are retried with fresh contraction directions.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::postprocess::CoreTensor;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::{CPDecomposition, DenseTensor3, Mode};

const EIG_SEPARATION_TOL: f64 = 1e-8;
const MAX_ATTEMPTS: usize = 5;

/// Decomposition plus diagnostics of the eigenvalue pairing.
#[derive(Debug, Clone)]
pub struct JennrichOutput {
    pub decomposition: CPDecomposition,
    /// `|lambda_u * lambda_v - 1|` for each matched eigenvalue pair.
    pub reciprocal_residuals: Vec<f64>,
    /// Contraction draws used (1 = first try succeeded).
    pub attempts: usize,
}

fn random_unit(dim: usize, rng: &mut Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Thin SVD truncated to `rank`, singular values sorted descending,
/// computed through the symmetric eigendecomposition of the smaller Gram
/// matrix (robust where nalgebra's one-sided SVD mispairs vectors).
fn svd_truncated(m: &DMatrix<f64>, rank: usize) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    if rank > m.nrows().min(m.ncols()) {
        return Err(Error::Degenerate("matrix smaller than requested rank".into()));
    }
    let (u_r, s_r, v_r) = if m.ncols() <= m.nrows() {
        let (vals, vecs) = crate::linalg::symmetric_eigen_sorted(m.transpose() * m);
        let sv: Vec<f64> = vals.iter().map(|l| l.max(0.0).sqrt()).collect();
        check_rank(&sv, rank)?;
        let v_r = vecs.columns(0, rank).into_owned();
        let mut u_r = m * &v_r;
        for c in 0..rank {
            u_r.column_mut(c).scale_mut(1.0 / sv[c]);
        }
        (u_r, sv[..rank].to_vec(), v_r)
    } else {
        let (vals, vecs) = crate::linalg::symmetric_eigen_sorted(m * m.transpose());
        let sv: Vec<f64> = vals.iter().map(|l| l.max(0.0).sqrt()).collect();
        check_rank(&sv, rank)?;
        let u_r = vecs.columns(0, rank).into_owned();
        let mut v_r = m.transpose() * &u_r;
        for c in 0..rank {
            v_r.column_mut(c).scale_mut(1.0 / sv[c]);
        }
        (u_r, sv[..rank].to_vec(), v_r)
    };
    Ok((u_r, s_r, v_r))
}

fn check_rank(sv: &[f64], rank: usize) -> Result<()> {
    let smax = sv[0].max(1e-300);
    if sv[rank - 1] <= 1e-13 * smax {
        return Err(Error::Degenerate(format!(
            "contraction numerically rank-deficient: sigma_{} = {:.3e}",
            rank,
            sv[rank - 1]
        )));
    }
    Ok(())
}

/// Eigendecomposition of a small real matrix whose spectrum should be real
/// and separated; eigenvectors come from the null space of `M - lambda I`.
fn separated_real_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let dim = m.nrows();
    let complex = m.clone().complex_eigenvalues();
    let scale = complex.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    let mut eigenvalues = Vec::with_capacity(dim);
    for z in complex.iter() {
        if z.im.abs() > EIG_SEPARATION_TOL * scale {
            return Err(Error::Degenerate(format!(
                "complex eigenvalue residue {:.3e}",
                z.im.abs() / scale
            )));
        }
        eigenvalues.push(z.re);
    }
    let mut min_gap = f64::INFINITY;
    for i in 0..dim {
        for j in 0..i {
            min_gap = min_gap.min((eigenvalues[i] - eigenvalues[j]).abs());
        }
    }
    if dim > 1 && min_gap < EIG_SEPARATION_TOL * scale {
        return Err(Error::Degenerate(format!(
            "eigenvalue gap {:.3e} below tolerance",
            min_gap / scale
        )));
    }
    let mut vectors = Vec::with_capacity(dim);
    for &lambda in &eigenvalues {
        let mut shifted = m.clone();
        for i in 0..dim {
            shifted[(i, i)] -= lambda;
        }
        // null direction = eigenvector of the smallest eigenvalue of S^T S
        let (_, vecs) = crate::linalg::symmetric_eigen_sorted(shifted.transpose() * &shifted);
        vectors.push(vecs.column(dim - 1).into_owned());
    }
    Ok((eigenvalues, vectors))
}

/// Greedy reciprocal matching: repeatedly take the unmatched pair with the
/// smallest `|lambda_u * lambda_v - 1|`.
fn pair_reciprocals(lu: &[f64], lv: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
    let r = lu.len();
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(r * r);
    for i in 0..r {
        for j in 0..r {
            scored.push(((lu[i] * lv[j] - 1.0).abs(), i, j));
        }
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut match_of = vec![usize::MAX; r];
    let mut used_v = vec![false; r];
    let mut residuals = vec![f64::INFINITY; r];
    let mut assigned = 0;
    for (score, i, j) in scored {
        if match_of[i] != usize::MAX || used_v[j] {
            continue;
        }
        match_of[i] = j;
        used_v[j] = true;
        residuals[i] = score;
        assigned += 1;
        if assigned == r {
            break;
        }
    }
    if assigned != r {
        return Err(Error::Degenerate("reciprocal matching incomplete".into()));
    }
    Ok((match_of, residuals))
}

struct ContractionPair {
    /// x-mode components in the reduced coordinates (columns).
    p: DMatrix<f64>,
    /// y-mode components in the reduced coordinates (columns).
    q: DMatrix<f64>,
    residuals: Vec<f64>,
}

/// Shared eigendecomposition step: given the two rank-truncated contraction
/// matrices (in any coordinates), produce matched x/y component columns.
fn diagonalize_pair(ga: &DMatrix<f64>, gb: &DMatrix<f64>, rank: usize) -> Result<ContractionPair> {
    let (ua, sa, va) = svd_truncated(ga, rank)?;
    let (ub, sb, vb) = svd_truncated(gb, rank)?;
    let sa_inv = DMatrix::from_diagonal(&DVector::from_iterator(rank, sa.iter().map(|s| 1.0 / s)));
    let sa_diag = DMatrix::from_diagonal(&DVector::from_column_slice(&sa));
    let sb_inv = DMatrix::from_diagonal(&DVector::from_iterator(rank, sb.iter().map(|s| 1.0 / s)));
    let sb_diag = DMatrix::from_diagonal(&DVector::from_column_slice(&sb));

    // U = Ga_r (Gb_r)^+ restricted to its range span(ua):
    //   ua^T Ga_r = Sa va^T, (Gb_r)^+ = vb Sb^{-1} ub^T
    let m1 = &sa_diag * va.transpose() * &vb * &sb_inv * ub.transpose() * &ua;
    // V = ((Ga_r)^+ Gb_r)^T restricted to span(vb):
    let m2 = &sb_diag * ub.transpose() * &ua * &sa_inv * va.transpose() * &vb;

    let (lu, pu) = separated_real_eigen(&m1)?;
    let (lv, qv) = separated_real_eigen(&m2)?;
    let (match_of, residuals) = pair_reciprocals(&lu, &lv)?;

    let mut p = DMatrix::zeros(ga.nrows(), rank);
    let mut q = DMatrix::zeros(gb.ncols(), rank);
    for i in 0..rank {
        p.set_column(i, &(&ua * &pu[i]));
        q.set_column(i, &(&vb * &qv[match_of[i]]));
    }
    Ok(ContractionPair { p, q, residuals })
}

/// Solve `min || core - sum_i p_i ⊗ q_i ⊗ s_i ||` for the third-mode
/// columns `s_i` given matched first/second-mode columns: rows of the
/// matricized core against the Khatri-Rao design, via normal equations.
fn solve_third_mode(core_mat: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = crate::linalg::khatri_rao(p, q)?;
    let gram = k.transpose() * &k;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("matched components nearly dependent in third-mode solve".into()))?;
    // core_mat is (dim_c x dim_a*dim_b); rows approximate S K^T, so
    // S = core_mat K (K^T K)^{-1}
    let rhs = core_mat * &k;
    Ok(chol.solve(&rhs.transpose()).transpose())
}

/// Decompose a core tensor into `rank` rank-1 components, lifting through
/// the triple. Contractions and eigenproblems all live in the r-dimensional
/// core coordinates, so the cost is `n * poly(r)`.
pub fn jennrich_core(core: &CoreTensor, rank: usize, seed: u64) -> Result<JennrichOutput> {
    let rc = core.r();
    if rank == 0 || rank > rc {
        return Err(Error::Dimension(format!("rank {} out of range for core size {}", rank, rc)));
    }
    let mut last_error = None;
    let mut min_gap_seen = f64::INFINITY;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_from_seed(derive_seed(seed, attempt as u64));
        let alpha = random_unit(rc, &mut rng);
        let beta = random_unit(rc, &mut rng);
        let mut ga = DMatrix::zeros(rc, rc);
        let mut gb = DMatrix::zeros(rc, rc);
        for a in 0..rc {
            for b in 0..rc {
                let mut va = 0.0;
                let mut vb = 0.0;
                for c in 0..rc {
                    let w = core.core_at(a, b, c);
                    va += w * alpha[c];
                    vb += w * beta[c];
                }
                ga[(a, b)] = va;
                gb[(a, b)] = vb;
            }
        }
        match diagonalize_pair(&ga, &gb, rank) {
            Ok(pair) => {
                // core matricized with c as rows, (a, b) as columns
                let mut core_mat = DMatrix::zeros(rc, rc * rc);
                for a in 0..rc {
                    for b in 0..rc {
                        for c in 0..rc {
                            core_mat[(c, a * rc + b)] = core.core_at(a, b, c);
                        }
                    }
                }
                let s = solve_third_mode(&core_mat, &pair.p, &pair.q)?;
                let triple = core.triple();
                let decomposition = CPDecomposition::from_components(
                    vec![1.0; rank],
                    triple.vx().matrix() * &pair.p,
                    triple.vy().matrix() * &pair.q,
                    triple.vz().matrix() * &s,
                )?;
                return Ok(JennrichOutput {
                    decomposition,
                    reciprocal_residuals: pair.residuals,
                    attempts: attempt + 1,
                });
            }
            Err(e) => {
                if let Error::Degenerate(msg) = &e {
                    if let Some(gap) = msg.split_whitespace().find_map(|w| w.parse::<f64>().ok()) {
                        min_gap_seen = min_gap_seen.min(gap);
                    }
                }
                last_error = Some(e);
            }
        }
    }
    let _ = last_error;
    Err(Error::EigenvalueCollision { attempts: MAX_ATTEMPTS, min_gap: min_gap_seen })
}

/// Dense-ambient decomposition for validation at small n: contractions are
/// full `n x n` matrices and the third-mode solve runs over all entries.
pub fn jennrich_dense(t: &DenseTensor3, rank: usize, seed: u64) -> Result<JennrichOutput> {
    let (n1, n2, n3) = t.dims();
    if n1 != n2 || n2 != n3 {
        return Err(Error::Dimension("decomposition expects cubic dims".into()));
    }
    let n = n1;
    if rank == 0 || rank > n {
        return Err(Error::Dimension(format!("rank {} out of range for n = {}", rank, n)));
    }
    let mut last_min_gap = f64::INFINITY;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_from_seed(derive_seed(seed, attempt as u64));
        let a = random_unit(n, &mut rng);
        let b = random_unit(n, &mut rng);
        let mut ta = DMatrix::zeros(n, n);
        let mut tb = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut va = 0.0;
                let mut vb = 0.0;
                for k in 0..n {
                    let w = t.get(i, j, k);
                    va += w * a[k];
                    vb += w * b[k];
                }
                ta[(i, j)] = va;
                tb[(i, j)] = vb;
            }
        }
        match diagonalize_pair(&ta, &tb, rank) {
            Ok(pair) => {
                // third-mode least squares over all entries, layer by layer
                let mut gram = DMatrix::zeros(rank, rank);
                for s in 0..rank {
                    for tt in 0..rank {
                        gram[(s, tt)] =
                            pair.p.column(s).dot(&pair.p.column(tt)) * pair.q.column(s).dot(&pair.q.column(tt));
                    }
                }
                let chol = match gram.clone().cholesky() {
                    Some(c) => c,
                    None => {
                        last_min_gap = last_min_gap.min(0.0);
                        continue;
                    }
                };
                let mut z = DMatrix::zeros(n, rank);
                for k in 0..n {
                    let mut rhs = DVector::zeros(rank);
                    for s in 0..rank {
                        let mut acc = 0.0;
                        for i in 0..n {
                            let pi = pair.p[(i, s)];
                            if pi == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                acc += t.get(i, j, k) * pi * pair.q[(j, s)];
                            }
                        }
                        rhs[s] = acc;
                    }
                    let w = chol.solve(&rhs);
                    for s in 0..rank {
                        z[(k, s)] = w[s];
                    }
                }
                let decomposition =
                    CPDecomposition::from_components(vec![1.0; rank], pair.p.clone(), pair.q.clone(), z)?;
                return Ok(JennrichOutput {
                    decomposition,
                    reciprocal_residuals: pair.residuals,
                    attempts: attempt + 1,
                });
            }
            Err(Error::Degenerate(msg)) => {
                if let Some(gap) = msg.split_whitespace().find_map(|w| w.parse::<f64>().ok()) {
                    last_min_gap = last_min_gap.min(gap);
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::EigenvalueCollision { attempts: MAX_ATTEMPTS, min_gap: last_min_gap })
}

/// One matched component pair and its errors.
#[derive(Debug, Clone)]
pub struct ComponentMatch {
    pub est_index: usize,
    pub truth_index: usize,
    /// Per-mode sign flips; their product is +1 by convention, the weight
    /// being nonnegative on both sides.
    pub signs: (f64, f64, f64),
    pub sigma_rel_err: f64,
    pub x_err: f64,
    pub y_err: f64,
    pub z_err: f64,
}

/// Result of aligning an estimated decomposition with the truth.
#[derive(Debug, Clone)]
pub struct MatchReport {
    /// `permutation[est_index] = truth_index`.
    pub permutation: Vec<usize>,
    pub matches: Vec<ComponentMatch>,
}

impl MatchReport {
    /// Largest factor-vector error over all modes and components.
    pub fn max_factor_error(&self) -> f64 {
        self.matches
            .iter()
            .map(|m| m.x_err.max(m.y_err).max(m.z_err))
            .fold(0.0, f64::max)
    }

    pub fn max_sigma_rel_err(&self) -> f64 {
        self.matches.iter().map(|m| m.sigma_rel_err).fold(0.0, f64::max)
    }
}

/// Greedy matching maximizing x-mode alignment, resolving the permutation
/// and per-mode sign ambiguity of a decomposition.
pub fn match_components(est: &CPDecomposition, truth: &CPDecomposition) -> Result<MatchReport> {
    if est.rank() != truth.rank() {
        return Err(Error::Dimension(format!(
            "ranks differ: {} vs {}",
            est.rank(),
            truth.rank()
        )));
    }
    if est.n() != truth.n() {
        return Err(Error::Dimension(format!("dims differ: {} vs {}", est.n(), truth.n())));
    }
    let r = est.rank();
    let ex = est.factor(Mode::X);
    let tx = truth.factor(Mode::X);
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(r * r);
    for i in 0..r {
        for t in 0..r {
            scored.push((ex.column(i).dot(&tx.column(t)).abs(), i, t));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut permutation = vec![usize::MAX; r];
    let mut taken = vec![false; r];
    let mut assigned = 0;
    for (_, i, t) in scored {
        if permutation[i] != usize::MAX || taken[t] {
            continue;
        }
        permutation[i] = t;
        taken[t] = true;
        assigned += 1;
        if assigned == r {
            break;
        }
    }
    debug_assert_eq!(assigned, r);

    let sigma_1 = truth.sigmas()[0];
    let mut matches = Vec::with_capacity(r);
    for i in 0..r {
        let t = permutation[i];
        let sx = if ex.column(i).dot(&tx.column(t)) >= 0.0 { 1.0 } else { -1.0 };
        let sy = if est.factor(Mode::Y).column(i).dot(&truth.factor(Mode::Y).column(t)) >= 0.0 {
            1.0
        } else {
            -1.0
        };
        let sz = sx * sy;
        let x_err = (truth.factor(Mode::X).column(t) - ex.column(i) * sx).norm();
        let y_err = (truth.factor(Mode::Y).column(t) - est.factor(Mode::Y).column(i) * sy).norm();
        let z_err = (truth.factor(Mode::Z).column(t) - est.factor(Mode::Z).column(i) * sz).norm();
        let sigma_rel_err = (truth.sigmas()[t] - est.sigmas()[i]).abs() / sigma_1;
        matches.push(ComponentMatch {
            est_index: i,
            truth_index: t,
            signs: (sx, sy, sz),
            sigma_rel_err,
            x_err,
            y_err,
            z_err,
        });
    }
    matches.sort_by_key(|m| m.truth_index);
    Ok(MatchReport { permutation, matches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::project_to_subspaces;
    use crate::rng::rng_from_seed;
    use crate::sampling::sample;
    use crate::synthetic::gen_uncorrelated;
    use crate::tensor::normalized_mse_dense;
    use rand::Rng;

    fn coordinate_cp(n: usize, r: usize) -> CPDecomposition {
        let mut m = DMatrix::zeros(n, r);
        for c in 0..r {
            m[(c, c)] = 1.0;
        }
        CPDecomposition::new(vec![1.0; r], m.clone(), m.clone(), m).unwrap()
    }

    #[test]
    fn diagonal_tensor_recovered_exactly() {
        let truth = coordinate_cp(5, 3);
        let dense = truth.materialize().unwrap();
        let out = jennrich_dense(&dense, 3, 7).unwrap();
        let report = match_components(&out.decomposition, &truth).unwrap();
        assert!(report.max_factor_error() < 1e-8, "error {}", report.max_factor_error());
        assert!(report.max_sigma_rel_err() < 1e-8);
    }

    #[test]
    fn dense_round_trip() {
        let truth = gen_uncorrelated(10, 3, 19).unwrap();
        let dense = truth.materialize().unwrap();
        let out = jennrich_dense(&dense, 3, 20).unwrap();
        let est_dense = out.decomposition.materialize().unwrap();
        let err = normalized_mse_dense(&est_dense, &truth).unwrap() * truth.frobenius_norm();
        assert!(err < 1e-8, "frobenius error {}", err);
        let report = match_components(&out.decomposition, &truth).unwrap();
        assert!(report.max_factor_error() < 1e-6, "component error {}", report.max_factor_error());
        for resid in &out.reciprocal_residuals {
            assert!(*resid < 1e-6, "reciprocal residual {}", resid);
        }
    }

    #[test]
    fn core_round_trip_matches_truth() {
        let truth = gen_uncorrelated(30, 3, 29).unwrap();
        let obs = sample(&truth, 1.0, 0).unwrap();
        let core = project_to_subspaces(&obs, &truth.spans().unwrap()).unwrap();
        let out = jennrich_core(&core, 3, 30).unwrap();
        let report = match_components(&out.decomposition, &truth).unwrap();
        assert!(report.max_factor_error() < 1e-6, "component error {}", report.max_factor_error());
    }

    #[test]
    fn perturbation_robustness() {
        let truth = gen_uncorrelated(10, 3, 39).unwrap();
        let mut dense = truth.materialize().unwrap();
        let mut rng = rng_from_seed(40);
        let noisy: Vec<f64> = dense.values().iter().map(|v| v + 1e-9 * (rng.gen::<f64>() - 0.5)).collect();
        dense = DenseTensor3::new(dense.dims(), noisy).unwrap();
        let out = jennrich_dense(&dense, 3, 41).unwrap();
        let report = match_components(&out.decomposition, &truth).unwrap();
        assert!(report.max_factor_error() < 1e-6, "component error {}", report.max_factor_error());
    }

    #[test]
    fn match_identity_and_constructed_ambiguity() {
        let truth = gen_uncorrelated(8, 3, 49).unwrap();
        let report = match_components(&truth, &truth).unwrap();
        for (i, m) in report.matches.iter().enumerate() {
            assert_eq!(m.truth_index, i);
            assert_eq!(m.est_index, i);
            assert_eq!(m.signs, (1.0, 1.0, 1.0));
            assert!(m.x_err < 1e-12 && m.y_err < 1e-12 && m.z_err < 1e-12);
        }

        // reversed components, x and y signs flipped (z compensated by product)
        let r = 3;
        let gather = |m: &DMatrix<f64>, flip: f64| {
            let mut out = DMatrix::zeros(8, r);
            for c in 0..r {
                out.set_column(c, &(m.column(r - 1 - c) * flip));
            }
            out
        };
        // equal sigmas keep the reversed order a valid decomposition
        let est = CPDecomposition::new(
            vec![1.0; r],
            gather(truth.factor(Mode::X), -1.0),
            gather(truth.factor(Mode::Y), -1.0),
            gather(truth.factor(Mode::Z), 1.0),
        )
        .unwrap();
        let report = match_components(&est, &truth).unwrap();
        for m in &report.matches {
            assert_eq!(m.est_index, r - 1 - m.truth_index);
            assert!(m.x_err < 1e-12 && m.y_err < 1e-12 && m.z_err < 1e-12);
            assert_eq!(m.signs.0 * m.signs.1 * m.signs.2, 1.0);
        }
    }

    #[test]
    fn matched_errors_track_perturbation_size() {
        let truth = gen_uncorrelated(12, 3, 59).unwrap();
        let eps = 1e-4;
        let mut rng = rng_from_seed(60);
        let mut perturb = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for v in out.iter_mut() {
                *v += eps * (rng.gen::<f64>() - 0.5);
            }
            out
        };
        let est = CPDecomposition::from_components(
            vec![1.0; 3],
            perturb(truth.factor(Mode::X)),
            perturb(truth.factor(Mode::Y)),
            perturb(truth.factor(Mode::Z)),
        )
        .unwrap();
        let report = match_components(&est, &truth).unwrap();
        let err = report.max_factor_error();
        assert!(err > eps * 1e-2 && err < eps * 1e2, "error {} vs eps {}", err, eps);
    }
}
