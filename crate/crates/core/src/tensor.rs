//! Dense and factored third-order tensors, unfoldings and error metrics.
//!
//! Dense storage is mode-1 major: entry `(i, j, k)` lives at linear index
//! `i*n2*n3 + j*n3 + k`. Unfolding column conventions are fixed once here
//! and used consistently everywhere: mode x maps `(i,j,k)` to row `i`,
//! column `j*n + k`; modes y and z are the cyclic analogues.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::subspace::{orthonormal_span, SubspaceTriple};

/// Largest dimension at which `n^3` (or `n x n^2`) arrays may be
/// materialized. Above this every code path must stay factored or sparse.
pub const DENSE_LIMIT: usize = 64;

/// Tensor mode (which index plays the role of the rows in an unfolding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    X,
    Y,
    Z,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::X, Mode::Y, Mode::Z];

    /// Cyclic successor: x -> y -> z -> x.
    pub fn next(self) -> Mode {
        match self {
            Mode::X => Mode::Y,
            Mode::Y => Mode::Z,
            Mode::Z => Mode::X,
        }
    }

    /// Reorder `(i, j, k)` as `(row, c1, c2)` for this mode's unfolding;
    /// the column index is `c1 * dim(c2) + c2`.
    pub fn permute(self, i: usize, j: usize, k: usize) -> (usize, usize, usize) {
        match self {
            Mode::X => (i, j, k),
            Mode::Y => (j, k, i),
            Mode::Z => (k, i, j),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::X => write!(f, "x"),
            Mode::Y => write!(f, "y"),
            Mode::Z => write!(f, "z"),
        }
    }
}

/// Anything that can evaluate entries of an `n1 x n2 x n3` tensor.
pub trait EntrySource {
    fn dims(&self) -> (usize, usize, usize);
    fn entry(&self, i: usize, j: usize, k: usize) -> f64;
}

/// Dense third-order tensor in mode-1-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor3 {
    dims: (usize, usize, usize),
    values: Vec<f64>,
}

impl DenseTensor3 {
    pub fn new(dims: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        let (n1, n2, n3) = dims;
        if n1 == 0 || n2 == 0 || n3 == 0 {
            return Err(Error::InvalidArgument("tensor dimensions must be positive".into()));
        }
        let count = n1
            .checked_mul(n2)
            .and_then(|v| v.checked_mul(n3))
            .ok_or_else(|| Error::Dimension("n1*n2*n3 overflows usize".into()))?;
        if values.len() != count {
            return Err(Error::Dimension(format!(
                "expected {} values for dims {:?}, got {}",
                count,
                dims,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tensor values must be finite".into()));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Result<Self> {
        let count = dims
            .0
            .checked_mul(dims.1)
            .and_then(|v| v.checked_mul(dims.2))
            .ok_or_else(|| Error::Dimension("n1*n2*n3 overflows usize".into()))?;
        Self::new(dims, vec![0.0; count])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims.0 && j < self.dims.1 && k < self.dims.2);
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.values[idx] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mode unfolding into an `n_mode x (prod of other dims)` matrix.
    pub fn unfold(&self, mode: Mode) -> DMatrix<f64> {
        let (n1, n2, n3) = self.dims;
        let dim_of = |axis: usize| [n1, n2, n3][axis];
        // rows/cols of the unfolding for this mode
        let (rows, ca, cb) = match mode {
            Mode::X => (n1, n2, n3),
            Mode::Y => (n2, n3, n1),
            Mode::Z => (n3, n1, n2),
        };
        let _ = dim_of;
        let mut out = DMatrix::zeros(rows, ca * cb);
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    let (r, c1, c2) = mode.permute(i, j, k);
                    out[(r, c1 * cb + c2)] = self.get(i, j, k);
                }
            }
        }
        out
    }
}

impl EntrySource for DenseTensor3 {
    fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn entry(&self, i: usize, j: usize, k: usize) -> f64 {
        self.get(i, j, k)
    }
}

/// Rank-r CP decomposition of a cubic tensor: `sum_i sigma_i x_i ⊗ y_i ⊗ z_i`
/// with unit-norm factor columns and descending positive weights.
#[derive(Debug, Clone)]
pub struct CPDecomposition {
    n: usize,
    r: usize,
    sigmas: Vec<f64>,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    z: DMatrix<f64>,
}

const UNIT_COLUMN_TOL: f64 = 1e-12;

impl CPDecomposition {
    pub fn new(sigmas: Vec<f64>, x: DMatrix<f64>, y: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let r = sigmas.len();
        let n = x.nrows();
        if r == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if r > n {
            return Err(Error::Dimension(format!("rank {} exceeds dimension {}", r, n)));
        }
        for m in [&x, &y, &z] {
            if m.nrows() != n || m.ncols() != r {
                return Err(Error::Dimension(format!(
                    "factor matrices must be {}x{}, got {}x{}",
                    n,
                    r,
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        for w in sigmas.windows(2) {
            if w[0] < w[1] {
                return Err(Error::InvalidArgument("sigmas must be sorted descending".into()));
            }
        }
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("sigmas must be positive and finite".into()));
        }
        for m in [&x, &y, &z] {
            for c in 0..r {
                let norm = m.column(c).norm();
                if (norm - 1.0).abs() > UNIT_COLUMN_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "factor column {} has norm {} (must be 1 within {:.0e})",
                        c, norm, UNIT_COLUMN_TOL
                    )));
                }
            }
        }
        Ok(Self { n, r, sigmas, x, y, z })
    }

    /// Build from possibly unnormalized, unsorted components; column norms
    /// are folded into the weights and components with nonpositive weight
    /// get their sign absorbed into the z factor.
    pub fn from_components(weights: Vec<f64>, mut x: DMatrix<f64>, mut y: DMatrix<f64>, mut z: DMatrix<f64>) -> Result<Self> {
        let r = weights.len();
        let mut sigmas = Vec::with_capacity(r);
        for c in 0..r {
            let (nx, ny, nz) = (x.column(c).norm(), y.column(c).norm(), z.column(c).norm());
            if nx == 0.0 || ny == 0.0 || nz == 0.0 {
                return Err(Error::Degenerate(format!("component {} has a zero factor", c)));
            }
            let mut s = weights[c] * nx * ny * nz;
            x.column_mut(c).scale_mut(1.0 / nx);
            y.column_mut(c).scale_mut(1.0 / ny);
            z.column_mut(c).scale_mut(1.0 / nz);
            if s < 0.0 {
                s = -s;
                z.column_mut(c).neg_mut();
            }
            sigmas.push(s);
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&a, &b| sigmas[b].partial_cmp(&sigmas[a]).unwrap());
        let gather = |m: &DMatrix<f64>| {
            DMatrix::from_fn(m.nrows(), r, |i, c| m[(i, order[c])])
        };
        let sorted_sigmas = order.iter().map(|&c| sigmas[c]).collect();
        Self::new(sorted_sigmas, gather(&x), gather(&y), gather(&z))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn factor(&self, mode: Mode) -> &DMatrix<f64> {
        match mode {
            Mode::X => &self.x,
            Mode::Y => &self.y,
            Mode::Z => &self.z,
        }
    }

    /// Dense materialization; refuses above [`DENSE_LIMIT`].
    pub fn materialize(&self) -> Result<DenseTensor3> {
        if self.n > DENSE_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "refusing to materialize n={} > {} dense tensor",
                self.n, DENSE_LIMIT
            )));
        }
        let n = self.n;
        let mut values = vec![0.0; n * n * n];
        for t in 0..self.r {
            let s = self.sigmas[t];
            let (xc, yc, zc) = (self.x.column(t), self.y.column(t), self.z.column(t));
            let mut idx = 0;
            for i in 0..n {
                let sxi = s * xc[i];
                for j in 0..n {
                    let sxy = sxi * yc[j];
                    for k in 0..n {
                        values[idx] += sxy * zc[k];
                        idx += 1;
                    }
                }
            }
        }
        DenseTensor3::new((n, n, n), values)
    }

    /// Factored mode unfolding `M_mode * D * N^T`; never materializes.
    pub fn unfold(&self, mode: Mode) -> CpUnfolding<'_> {
        let (left, right_a, right_b) = match mode {
            Mode::X => (&self.x, &self.y, &self.z),
            Mode::Y => (&self.y, &self.z, &self.x),
            Mode::Z => (&self.z, &self.x, &self.y),
        };
        CpUnfolding { left, sigmas: &self.sigmas, right_a, right_b }
    }

    pub fn frobenius_norm(&self) -> f64 {
        cp_inner(self, self).max(0.0).sqrt()
    }

    /// Root-mean-square entry magnitude, `||T||_F / n^{3/2}`.
    pub fn rms_entry(&self) -> f64 {
        self.frobenius_norm() / (self.n as f64).powf(1.5)
    }

    /// Orthonormal bases of the three factor spans.
    pub fn spans(&self) -> Result<SubspaceTriple> {
        let vx = orthonormal_span(&self.x)?;
        let vy = orthonormal_span(&self.y)?;
        let vz = orthonormal_span(&self.z)?;
        SubspaceTriple::new(vx, vy, vz)
    }

    /// Incoherence, robust linear independence and condition number of the
    /// instance.
    pub fn assumptions(&self) -> Result<AssumptionsReport> {
        let spans = self.spans()?;
        let mut c = f64::INFINITY;
        for m in [&self.x, &self.y, &self.z] {
            c = c.min(crate::linalg::smallest_singular_value(m));
        }
        Ok(AssumptionsReport {
            mu_x: spans.vx().incoherence(),
            mu_y: spans.vy().incoherence(),
            mu_z: spans.vz().incoherence(),
            c,
            kappa: self.sigmas[0] / self.sigmas[self.r - 1],
        })
    }
}

impl EntrySource for CPDecomposition {
    fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.n, self.n)
    }

    #[inline]
    fn entry(&self, i: usize, j: usize, k: usize) -> f64 {
        let mut v = 0.0;
        for t in 0..self.r {
            v += self.sigmas[t] * self.x[(i, t)] * self.y[(j, t)] * self.z[(k, t)];
        }
        v
    }
}

/// Factored unfolding `left * diag(sigmas) * khatri_rao(right_a, right_b)^T`.
pub struct CpUnfolding<'a> {
    pub left: &'a DMatrix<f64>,
    pub sigmas: &'a [f64],
    pub right_a: &'a DMatrix<f64>,
    pub right_b: &'a DMatrix<f64>,
}

impl CpUnfolding<'_> {
    /// Materialize the `n x n^2` matrix; refuses above [`DENSE_LIMIT`].
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.left.nrows();
        if n > DENSE_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "refusing to materialize {}x{} unfolding (n > {})",
                n,
                n * n,
                DENSE_LIMIT
            )));
        }
        let r = self.sigmas.len();
        let mut out = DMatrix::zeros(n, n * n);
        for t in 0..r {
            let s = self.sigmas[t];
            for row in 0..n {
                let ls = s * self.left[(row, t)];
                for a in 0..n {
                    let la = ls * self.right_a[(a, t)];
                    for b in 0..n {
                        out[(row, a * n + b)] += la * self.right_b[(b, t)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// The r nonzero singular values of the unfolding, descending, computed
    /// from r x r Gram matrices without touching n^2 columns.
    pub fn singular_values(&self) -> Vec<f64> {
        let r = self.sigmas.len();
        let gram_a = self.right_a.transpose() * self.right_a;
        let gram_b = self.right_b.transpose() * self.right_b;
        // N^T N is the Hadamard product of the right Gram matrices.
        let mut c = DMatrix::zeros(r, r);
        for i in 0..r {
            for j in 0..r {
                c[(i, j)] = gram_a[(i, j)] * gram_b[(i, j)];
            }
        }
        let eig = nalgebra::SymmetricEigen::new(c);
        // C^{1/2} via its eigendecomposition (C is PSD).
        let mut half = DMatrix::zeros(r, r);
        for i in 0..r {
            let lam = eig.eigenvalues[i].max(0.0).sqrt();
            let v = eig.eigenvectors.column(i);
            for a in 0..r {
                for b in 0..r {
                    half[(a, b)] += lam * v[a] * v[b];
                }
            }
        }
        let mut ld = self.left.clone();
        for t in 0..r {
            ld.column_mut(t).scale_mut(self.sigmas[t]);
        }
        let reduced = ld * half;
        crate::linalg::singular_values(&reduced)
    }
}

/// Frobenius inner product of two CP tensors via cross Gram matrices.
pub fn cp_inner(a: &CPDecomposition, b: &CPDecomposition) -> f64 {
    let gx = a.x.transpose() * &b.x;
    let gy = a.y.transpose() * &b.y;
    let gz = a.z.transpose() * &b.z;
    let mut acc = 0.0;
    for i in 0..a.r {
        for j in 0..b.r {
            acc += a.sigmas[i] * b.sigmas[j] * gx[(i, j)] * gy[(i, j)] * gz[(i, j)];
        }
    }
    acc
}

fn truth_norm(truth: &CPDecomposition) -> Result<f64> {
    let norm = truth.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("truth tensor has zero norm".into()));
    }
    Ok(norm)
}

/// `||est - truth||_F / ||truth||_F` for two factored tensors, computed
/// through Gram matrices (no n^3 work).
pub fn normalized_mse_cp(est: &CPDecomposition, truth: &CPDecomposition) -> Result<f64> {
    if est.n != truth.n {
        return Err(Error::Dimension(format!("dims differ: {} vs {}", est.n, truth.n)));
    }
    let tn = truth_norm(truth)?;
    let diff_sq = cp_inner(est, est) - 2.0 * cp_inner(est, truth) + tn * tn;
    Ok(diff_sq.max(0.0).sqrt() / tn)
}

/// `||est - truth||_F / ||truth||_F` for a dense estimate.
pub fn normalized_mse_dense(est: &DenseTensor3, truth: &CPDecomposition) -> Result<f64> {
    let (n1, n2, n3) = est.dims();
    if (n1, n2, n3) != truth.dims() {
        return Err(Error::Dimension(format!(
            "dims differ: {:?} vs {:?}",
            est.dims(),
            truth.dims()
        )));
    }
    let tn = truth_norm(truth)?;
    let mut diff_sq = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            for k in 0..n3 {
                let d = est.get(i, j, k) - truth.entry(i, j, k);
                diff_sq += d * d;
            }
        }
    }
    Ok(diff_sq.sqrt() / tn)
}

/// Report of the model assumptions measured on a concrete instance.
#[derive(Debug, Clone)]
pub struct AssumptionsReport {
    pub mu_x: f64,
    pub mu_y: f64,
    pub mu_z: f64,
    /// Smallest singular value over the three factor matrices.
    pub c: f64,
    /// Condition number `sigma_1 / sigma_r`.
    pub kappa: f64,
}

impl AssumptionsReport {
    pub fn max_mu(&self) -> f64 {
        self.mu_x.max(self.mu_y).max(self.mu_z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_unit_cols(n: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        let mut m = DMatrix::from_fn(n, r, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        for c in 0..r {
            let norm = m.column(c).norm();
            m.column_mut(c).scale_mut(1.0 / norm);
        }
        m
    }

    pub(crate) fn random_cp(n: usize, r: usize, seed: u64) -> CPDecomposition {
        let sigmas = (0..r).map(|i| 1.0 / (1.0 + i as f64)).collect();
        CPDecomposition::new(
            sigmas,
            random_unit_cols(n, r, seed),
            random_unit_cols(n, r, seed.wrapping_add(1)),
            random_unit_cols(n, r, seed.wrapping_add(2)),
        )
        .unwrap()
    }

    #[test]
    fn dense_layout_round_trip() {
        let mut t = DenseTensor3::zeros((2, 3, 4)).unwrap();
        t.set(1, 2, 3, 5.0);
        assert_eq!(t.values()[1 * 12 + 2 * 4 + 3], 5.0);
        assert_eq!(t.get(1, 2, 3), 5.0);
    }

    #[test]
    fn unfold_single_entry_rank_one() {
        // x=e1, y=e2, z=e3 at n=3: lone 1 at row 0, column 1*3+2 of the x-unfolding
        let n = 3;
        let e = |i: usize| {
            let mut v = DMatrix::zeros(n, 1);
            v[(i, 0)] = 1.0;
            v
        };
        let cp = CPDecomposition::new(vec![1.0], e(0), e(1), e(2)).unwrap();
        let u = cp.unfold(Mode::X).to_dense().unwrap();
        for row in 0..n {
            for col in 0..n * n {
                let expect = if row == 0 && col == 5 { 1.0 } else { 0.0 };
                assert_eq!(u[(row, col)], expect);
            }
        }
    }

    #[test]
    fn unfold_zero_tensor() {
        let t = DenseTensor3::zeros((3, 3, 3)).unwrap();
        for mode in Mode::ALL {
            assert_eq!(t.unfold(mode).norm(), 0.0);
        }
    }

    #[test]
    fn cp_unfold_matches_entrywise_evaluation() {
        // brute-force oracle: refold the dense unfolding and compare entries
        let cp = random_cp(4, 2, 99);
        for mode in Mode::ALL {
            let u = cp.unfold(mode).to_dense().unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    for k in 0..4 {
                        let (row, c1, c2) = mode.permute(i, j, k);
                        let got = u[(row, c1 * 4 + c2)];
                        assert_abs_diff_eq!(got, cp.entry(i, j, k), epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dense_unfold_agrees_with_cp_unfold() {
        let cp = random_cp(5, 3, 3);
        let dense = cp.materialize().unwrap();
        for mode in Mode::ALL {
            let a = dense.unfold(mode);
            let b = cp.unfold(mode).to_dense().unwrap();
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn factored_singular_values_match_dense() {
        let cp = random_cp(6, 3, 17);
        for mode in Mode::ALL {
            let sv_fact = cp.unfold(mode).singular_values();
            let dense = cp.unfold(mode).to_dense().unwrap();
            let mut sv_dense: Vec<f64> = dense.svd(false, false).singular_values.iter().cloned().collect();
            sv_dense.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for t in 0..3 {
                assert_abs_diff_eq!(sv_fact[t], sv_dense[t], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn normalized_mse_basic_cases() {
        let cp = random_cp(5, 2, 7);
        assert_abs_diff_eq!(normalized_mse_cp(&cp, &cp).unwrap(), 0.0, epsilon = 1e-12);
        let zero = DenseTensor3::zeros((5, 5, 5)).unwrap();
        assert_abs_diff_eq!(normalized_mse_dense(&zero, &cp).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalized_mse_factored_matches_dense() {
        let a = random_cp(5, 2, 11);
        let b = random_cp(5, 2, 12);
        let fact = normalized_mse_cp(&a, &b).unwrap();
        let dense = normalized_mse_dense(&a.materialize().unwrap(), &b).unwrap();
        assert_abs_diff_eq!(fact, dense, epsilon = 1e-10);
    }

    #[test]
    fn zero_truth_rejected() {
        let cp = random_cp(4, 2, 1);
        let zero = DenseTensor3::zeros((4, 4, 4)).unwrap();
        // truth must be a CP decomposition, which cannot be all-zero by
        // construction; the dense-estimate path still guards division.
        assert!(normalized_mse_dense(&zero, &cp).is_ok());
        assert!(CPDecomposition::new(
            vec![0.0],
            DMatrix::identity(3, 1),
            DMatrix::identity(3, 1),
            DMatrix::identity(3, 1)
        )
        .is_err());
    }

    #[test]
    fn invariants_enforced() {
        let x = DMatrix::identity(3, 2);
        assert!(CPDecomposition::new(vec![1.0, 2.0], x.clone(), x.clone(), x.clone()).is_err()); // ascending
        let mut bad = x.clone();
        bad[(0, 0)] = 2.0;
        assert!(CPDecomposition::new(vec![2.0, 1.0], bad, x.clone(), x.clone()).is_err()); // not unit
        assert!(DenseTensor3::new((2, 2, 2), vec![0.0; 7]).is_err());
        assert!(DenseTensor3::new((1, 1, 1), vec![f64::NAN]).is_err());
    }

    #[test]
    fn from_components_normalizes_and_sorts() {
        let mut rng = rng_from_seed(5);
        let raw = DMatrix::from_fn(4, 2, |_, _| rng.gen::<f64>() - 0.5);
        let cp = CPDecomposition::from_components(vec![-0.3, 2.0], raw.clone(), raw.clone(), raw.clone()).unwrap();
        assert!(cp.sigmas()[0] >= cp.sigmas()[1]);
        assert!(cp.sigmas().iter().all(|s| *s > 0.0));
    }
}
