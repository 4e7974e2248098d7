//! Orthonormal subspace bases, principal angles and incoherence.

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const ORTHONORMAL_TOL: f64 = 1e-10;

/// An `n x r` matrix with orthonormal columns, representing an r-dimensional
/// subspace of R^n. Comparisons downstream are always subspace-level
/// (principal angles); the particular basis is never canonicalized.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    mat: DMatrix<f64>,
}

impl SubspaceBasis {
    /// Wrap a matrix whose columns are already orthonormal (checked to
    /// 1e-10 entrywise on `B^T B - I`).
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        let r = mat.ncols();
        if r == 0 || r > mat.nrows() {
            return Err(Error::Dimension(format!(
                "subspace dimension {} invalid for ambient dimension {}",
                r,
                mat.nrows()
            )));
        }
        let gram = mat.transpose() * &mat;
        for i in 0..r {
            for j in 0..r {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - expect).abs() > ORTHONORMAL_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "columns not orthonormal: (B^T B)[{},{}] = {}",
                        i,
                        j,
                        gram[(i, j)]
                    )));
                }
            }
        }
        Ok(Self { mat })
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    pub fn r(&self) -> usize {
        self.mat.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    /// Smallest mu such that every standard basis vector projects onto the
    /// subspace with squared length at most mu * r / n.
    pub fn incoherence(&self) -> f64 {
        let (n, r) = (self.n(), self.r());
        let max_row_sq = (0..n)
            .map(|i| self.mat.row(i).norm_squared())
            .fold(0.0, f64::max);
        max_row_sq * n as f64 / r as f64
    }

    /// A basis whose principal angles to `self` all have sine `sin(theta)`,
    /// obtained by rotating every column towards a random orthogonal
    /// complement direction.
    pub fn rotated_by(&self, theta: f64, seed: u64) -> Result<SubspaceBasis> {
        let (n, r) = (self.n(), self.r());
        if r * 2 > n {
            return Err(Error::Dimension(
                "rotation needs 2r <= n for an orthogonal complement".into(),
            ));
        }
        let mut rng = rng_from_seed(seed);
        let g = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        // complement component of the random block
        let comp = &g - &self.mat * (self.mat.transpose() * &g);
        let w = orthonormal_span(&comp)?;
        let rotated = &self.mat * theta.cos() + w.matrix() * theta.sin();
        SubspaceBasis::new(rotated)
    }
}

/// Orthonormalize the column span of `m` via column-pivoted QR.
///
/// Fails if the numerical rank is below the column count, so a degenerate
/// span is surfaced instead of silently padded.
pub fn orthonormal_span(m: &DMatrix<f64>) -> Result<SubspaceBasis> {
    let r = m.ncols();
    let qr = m.clone().col_piv_qr();
    // with column pivoting the diagonal of R is non-increasing in magnitude
    let rmat = qr.r();
    let lead = rmat[(0, 0)].abs().max(1e-300);
    let tol = 1e-10 * lead;
    let rank = (0..r.min(rmat.nrows())).take_while(|&i| rmat[(i, i)].abs() > tol).count();
    if rank < r {
        return Err(Error::Degenerate(format!(
            "matrix has numerical rank {} < {} columns",
            rank, r
        )));
    }
    let q = qr.q();
    SubspaceBasis::new(q.columns(0, r).into_owned())
}

/// Sine of the largest principal angle between equal-dimension subspaces:
/// `sqrt(1 - sigma_min(U^T V)^2)`, clamped to [0, 1].
pub fn principal_angle_sine(u: &SubspaceBasis, v: &SubspaceBasis) -> Result<f64> {
    if u.n() != v.n() {
        return Err(Error::Dimension(format!(
            "ambient dimensions differ: {} vs {}",
            u.n(),
            v.n()
        )));
    }
    if u.r() != v.r() {
        return Err(Error::Dimension(format!(
            "subspace dimensions differ: {} vs {}",
            u.r(),
            v.r()
        )));
    }
    let prod = u.matrix().transpose() * v.matrix();
    let smin = crate::linalg::smallest_singular_value(&prod).clamp(0.0, 1.0);
    Ok((1.0 - smin * smin).max(0.0).sqrt())
}

/// Orthonormal subspace estimates for all three modes.
#[derive(Debug, Clone)]
pub struct SubspaceTriple {
    vx: SubspaceBasis,
    vy: SubspaceBasis,
    vz: SubspaceBasis,
}

impl SubspaceTriple {
    pub fn new(vx: SubspaceBasis, vy: SubspaceBasis, vz: SubspaceBasis) -> Result<Self> {
        if vx.n() != vy.n() || vy.n() != vz.n() || vx.r() != vy.r() || vy.r() != vz.r() {
            return Err(Error::Dimension(
                "triple components must share ambient and subspace dimensions".into(),
            ));
        }
        Ok(Self { vx, vy, vz })
    }

    pub fn n(&self) -> usize {
        self.vx.n()
    }

    pub fn r(&self) -> usize {
        self.vx.r()
    }

    pub fn vx(&self) -> &SubspaceBasis {
        &self.vx
    }

    pub fn vy(&self) -> &SubspaceBasis {
        &self.vy
    }

    pub fn vz(&self) -> &SubspaceBasis {
        &self.vz
    }

    pub fn get(&self, mode: crate::tensor::Mode) -> &SubspaceBasis {
        match mode {
            crate::tensor::Mode::X => &self.vx,
            crate::tensor::Mode::Y => &self.vy,
            crate::tensor::Mode::Z => &self.vz,
        }
    }

    pub fn replace(&mut self, mode: crate::tensor::Mode, basis: SubspaceBasis) {
        match mode {
            crate::tensor::Mode::X => self.vx = basis,
            crate::tensor::Mode::Y => self.vy = basis,
            crate::tensor::Mode::Z => self.vz = basis,
        }
    }

    /// Largest per-mode principal angle sine to another triple.
    pub fn max_angle_to(&self, other: &SubspaceTriple) -> Result<f64> {
        let ax = principal_angle_sine(&self.vx, &other.vx)?;
        let ay = principal_angle_sine(&self.vy, &other.vy)?;
        let az = principal_angle_sine(&self.vz, &other.vz)?;
        Ok(ax.max(ay).max(az))
    }

    /// Random r-dimensional spans for all modes (the practical-mode init).
    pub fn random(n: usize, r: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut gen_basis = || -> Result<SubspaceBasis> {
            let g = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            orthonormal_span(&g)
        };
        let vx = gen_basis()?;
        let vy = gen_basis()?;
        let vz = gen_basis()?;
        SubspaceTriple::new(vx, vy, vz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn span_of_coords(n: usize, coords: &[usize]) -> SubspaceBasis {
        let mut m = DMatrix::zeros(n, coords.len());
        for (c, &i) in coords.iter().enumerate() {
            m[(i, c)] = 1.0;
        }
        SubspaceBasis::new(m).unwrap()
    }

    #[test]
    fn angle_identity_and_orthogonal() {
        let u = span_of_coords(2, &[0]);
        let v = span_of_coords(2, &[1]);
        assert_abs_diff_eq!(principal_angle_sine(&u, &u).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(principal_angle_sine(&u, &v).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn angle_symmetry() {
        for seed in 0..20 {
            let a = SubspaceTriple::random(9, 3, seed).unwrap();
            let b = SubspaceTriple::random(9, 3, seed + 1000).unwrap();
            let ab = principal_angle_sine(a.vx(), b.vx()).unwrap();
            let ba = principal_angle_sine(b.vx(), a.vx()).unwrap();
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-10);
        }
    }

    #[test]
    fn incoherence_extremes() {
        // coordinate subspace: mu = n / r
        let coord = span_of_coords(10, &[0, 1]);
        assert_abs_diff_eq!(coord.incoherence(), 5.0, epsilon = 1e-12);
        // flat vector: mu = 1
        let n = 16;
        let flat = SubspaceBasis::new(DMatrix::from_element(n, 1, 1.0 / (n as f64).sqrt())).unwrap();
        assert_abs_diff_eq!(flat.incoherence(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn incoherence_matches_projector_oracle() {
        let basis = SubspaceTriple::random(100, 3, 7).unwrap().vx().clone();
        let p = basis.matrix() * basis.matrix().transpose();
        let mut max_proj_sq: f64 = 0.0;
        for i in 0..100 {
            max_proj_sq = max_proj_sq.max(p.column(i).norm_squared());
        }
        let oracle = max_proj_sq * 100.0 / 3.0;
        assert_abs_diff_eq!(basis.incoherence(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn rotation_hits_requested_angle() {
        for seed in 0..10 {
            let q = SubspaceTriple::random(20, 4, seed).unwrap().vx().clone();
            let theta = 0.1f64;
            let rot = q.rotated_by(theta, seed + 99).unwrap();
            let angle = principal_angle_sine(&q, &rot).unwrap();
            assert_abs_diff_eq!(angle, theta.sin(), epsilon = 1e-10);
        }
    }

    #[test]
    fn degenerate_span_rejected() {
        let mut m = DMatrix::zeros(5, 2);
        m[(0, 0)] = 1.0;
        m[(0, 1)] = 2.0; // second column parallel to first
        assert!(orthonormal_span(&m).is_err());
    }
}
