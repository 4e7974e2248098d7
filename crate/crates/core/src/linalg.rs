//! Kronecker and Khatri-Rao products, plus top-r singular subspace
//! extraction with an implicit-operator escape hatch for large sparse
//! matrices.

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::subspace::{orthonormal_span, principal_angle_sine, SubspaceBasis};
use crate::tensor::DENSE_LIMIT;

/// Kronecker product: column `i*q + j` of the result is
/// `(column i of a) ⊗ (column j of b)`.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows = a
        .nrows()
        .checked_mul(b.nrows())
        .ok_or_else(|| Error::Dimension("kronecker row count overflows".into()))?;
    let cols = a
        .ncols()
        .checked_mul(b.ncols())
        .ok_or_else(|| Error::Dimension("kronecker column count overflows".into()))?;
    let mut out = DMatrix::zeros(rows, cols);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..b.nrows() {
                for l in 0..b.ncols() {
                    out[(i * b.nrows() + k, j * b.ncols() + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    Ok(out)
}

/// Khatri-Rao (column-wise tensor) product: column `i` is `a_i ⊗ b_i`.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "khatri_rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = DMatrix::zeros(a.nrows() * b.nrows(), a.ncols());
    for c in 0..a.ncols() {
        for i in 0..a.nrows() {
            let ai = a[(i, c)];
            for k in 0..b.nrows() {
                out[(i * b.nrows() + k, c)] = ai * b[(k, c)];
            }
        }
    }
    Ok(out)
}

/// A linear operator exposing products with blocks of vectors, for power
/// iteration over matrices that are never materialized.
pub trait LinOp {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A * x` where `x` is `ncols x k`.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `A^T * x` where `x` is `nrows x k`.
    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// Dense view, when one exists, enabling the exact-SVD fallback.
    fn as_dense(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

impl LinOp for DMatrix<f64> {
    fn nrows(&self) -> usize {
        DMatrix::nrows(self)
    }

    fn ncols(&self) -> usize {
        DMatrix::ncols(self)
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }

    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.transpose() * x
    }

    fn as_dense(&self) -> Option<&DMatrix<f64>> {
        Some(self)
    }
}

/// Controls for block power iteration.
#[derive(Debug, Clone)]
pub struct PowerConfig {
    pub max_iters: usize,
    /// Convergence tolerance on subspace movement between iterations.
    pub tol: f64,
    /// Seed for the Gaussian start block.
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self { max_iters: 300, tol: 1e-10, seed: 0x5eed }
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted
/// descending. nalgebra leaves them unsorted.
pub fn symmetric_eigen_sorted(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let dim = m.nrows();
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(dim, dim);
    for (c, &idx) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(idx));
    }
    (values, vectors)
}

/// Singular values (descending) via the symmetric eigendecomposition of
/// the smaller Gram matrix. nalgebra's one-sided Golub-Kahan SVD mispairs
/// singular vectors on some structured rank-deficient inputs, so all
/// spectral extraction in this crate goes through the symmetric path.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let (vals, _) = symmetric_eigen_sorted(gram);
    vals.into_iter().map(|v| v.max(0.0).sqrt()).collect()
}

pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Orthonormal basis of the top-r left singular subspace of `op`.
///
/// Uses an exact symmetric eigendecomposition of the smaller Gram matrix
/// when a dense view is available and small enough, otherwise block power
/// iteration on `A A^T` from a seeded Gaussian start. Fails if the
/// subspace has not settled after `max_iters` (which is what a too-small
/// gap between the r-th and (r+1)-st singular values looks like).
pub fn top_r_left_singular_basis<L: LinOp>(op: &L, r: usize, cfg: &PowerConfig) -> Result<SubspaceBasis> {
    let (n, m) = (op.nrows(), op.ncols());
    if r == 0 || r > n.min(m) {
        return Err(Error::Dimension(format!(
            "rank {} out of range for {}x{} operator",
            r, n, m
        )));
    }
    if let Some(dense) = op.as_dense() {
        if n.min(m) <= DENSE_LIMIT {
            return dense_top_left_singular(dense, r);
        }
    }

    let mut rng = rng_from_seed(cfg.seed);
    let start = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let mut q = orthonormal_span(&start)?.into_matrix();
    let mut movement = f64::INFINITY;
    for it in 0..cfg.max_iters {
        let z = op.apply(&op.apply_transpose(&q));
        let q_new = orthonormal_span(&z)
            .map_err(|_| Error::NonConvergence { iterations: it, movement })?
            .into_matrix();
        movement = principal_angle_sine(
            &SubspaceBasis::new(q_new.clone())?,
            &SubspaceBasis::new(q.clone())?,
        )?;
        q = q_new;
        if movement < cfg.tol {
            return SubspaceBasis::new(q);
        }
    }
    Err(Error::NonConvergence { iterations: cfg.max_iters, movement })
}

/// Exact top-r left singular basis through the smaller Gram matrix.
fn dense_top_left_singular(m: &DMatrix<f64>, r: usize) -> Result<SubspaceBasis> {
    if m.nrows() <= m.ncols() {
        let (_, vectors) = symmetric_eigen_sorted(m * m.transpose());
        SubspaceBasis::new(vectors.columns(0, r).into_owned())
    } else {
        let (values, vectors) = symmetric_eigen_sorted(m.transpose() * m);
        if values[r - 1] <= 0.0 {
            return Err(Error::Degenerate(format!(
                "operator rank below requested {} (sigma_{}^2 = {:.3e})",
                r,
                r,
                values[r - 1]
            )));
        }
        let lifted = m * vectors.columns(0, r);
        orthonormal_span(&lifted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn kronecker_identities() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let k = kronecker(&i2, &i2).unwrap();
        assert_eq!(k, DMatrix::identity(4, 4));

        let a = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let e2 = kronecker(&a, &b).unwrap();
        assert_eq!(e2.as_slice(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn kronecker_matches_quadruple_loop() {
        let mut rng = rng_from_seed(4);
        let a = DMatrix::from_fn(3, 2, |_, _| rng.gen::<f64>() - 0.5);
        let b = DMatrix::from_fn(2, 2, |_, _| rng.gen::<f64>() - 0.5);
        let k = kronecker(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                for s in 0..2 {
                    for t in 0..2 {
                        assert_abs_diff_eq!(k[(i * 2 + s, j * 2 + t)], a[(i, j)] * b[(s, t)], epsilon = 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn khatri_rao_is_kronecker_column_subset() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let kr = khatri_rao(&i2, &i2).unwrap();
        // columns e1 and e4 of R^4
        assert_eq!(kr.column(0).as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(kr.column(1).as_slice(), &[0.0, 0.0, 0.0, 1.0]);

        let mut rng = rng_from_seed(9);
        let a = DMatrix::from_fn(4, 3, |_, _| rng.gen::<f64>() - 0.5);
        let b = DMatrix::from_fn(4, 3, |_, _| rng.gen::<f64>() - 0.5);
        let kr = khatri_rao(&a, &b).unwrap();
        let kron = kronecker(&a, &b).unwrap();
        for c in 0..3 {
            assert_eq!(kr.column(c), kron.column(c * 3 + c));
        }
        // per-column outer-product oracle
        for c in 0..3 {
            for i in 0..4 {
                for k in 0..4 {
                    assert_abs_diff_eq!(kr[(i * 4 + k, c)], a[(i, c)] * b[(k, c)], epsilon = 0.0);
                }
            }
        }
    }

    #[test]
    fn khatri_rao_rejects_mismatched_columns() {
        let a = DMatrix::<f64>::zeros(2, 2);
        let b = DMatrix::<f64>::zeros(2, 3);
        assert!(khatri_rao(&a, &b).is_err());
    }

    #[test]
    fn top_basis_diagonal_case() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[5.0, 3.0, 1.0, 0.0]));
        let basis = top_r_left_singular_basis(&m, 2, &PowerConfig::default()).unwrap();
        // span(e1, e2): rows 2 and 3 must vanish
        for i in 2..4 {
            assert_abs_diff_eq!(basis.matrix().row(i).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn top_basis_orthonormal_input() {
        let q = crate::subspace::SubspaceTriple::random(10, 3, 2).unwrap().vx().clone();
        let basis = top_r_left_singular_basis(q.matrix(), 3, &PowerConfig::default()).unwrap();
        assert!(principal_angle_sine(&basis, &q).unwrap() < 1e-10);
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        let mut rng = rng_from_seed(31);
        let m = DMatrix::from_fn(20, 30, |_, _| rng.gen::<f64>() - 0.5);
        let exact = dense_top_left_singular(&m, 4).unwrap();

        // force the power path through an opaque wrapper
        struct Opaque<'a>(&'a DMatrix<f64>);
        impl LinOp for Opaque<'_> {
            fn nrows(&self) -> usize {
                self.0.nrows()
            }
            fn ncols(&self) -> usize {
                self.0.ncols()
            }
            fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
                self.0 * x
            }
            fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
                self.0.transpose() * x
            }
        }
        let approx_basis =
            top_r_left_singular_basis(&Opaque(&m), 4, &PowerConfig { max_iters: 2000, ..Default::default() }).unwrap();
        assert!(principal_angle_sine(&approx_basis, &exact).unwrap() < 1e-8);
    }
}
