//! Spectral initialization: bias-corrected second-moment matrices built
//! fiber-by-fiber from one observation split, top-r eigenvectors by power
//! iteration, heavy-row trimming, and re-orthonormalization.
//!
//! The second-moment matrix `B = (1/p) diag(U U^T) + (1/p^2) offdiag(U U^T)`
//! (U the zero-filled unfolding) is assembled without ever forming `U`:
//! observations are grouped by their (column-pair) fiber and every
//! within-fiber index pair contributes one update, so the stored entry
//! count is `sum over fibers of X_f^2` and stays near-linear in the
//! observation count at the intended sampling rates.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{top_r_left_singular_basis, LinOp, PowerConfig};
use crate::rng::derive_seed;
use crate::sampling::ObservationSet;
use crate::subspace::{orthonormal_span, SubspaceTriple};
use crate::tensor::{Mode, DENSE_LIMIT};

/// Controls for the initialization stage.
#[derive(Debug, Clone)]
pub struct InitConfig {
    pub rank: usize,
    /// Trimming threshold multiplier: rows of the eigenvector matrix with
    /// norm at least `tau * sqrt(r/n)` are zeroed. The theory value
    /// ([`theory_tau`]) needs instance parameters the algorithm does not
    /// know, so the default is an empirical 10 (trimming is a no-op on the
    /// synthetic families at that setting).
    pub tau: f64,
    pub power_iters: usize,
    pub power_tol: f64,
    /// Hard cap on stored second-moment entries; pathological inputs abort
    /// with a budget error instead of exhausting memory.
    pub max_gram_entries: usize,
    pub seed: u64,
}

impl InitConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            tau: 10.0,
            power_iters: 300,
            power_tol: 1e-10,
            max_gram_entries: 100_000_000,
            seed: 0,
        }
    }
}

/// The trimming threshold from the analysis, `(2 mu r / c^2 * kappa^2)^5`.
/// At practical sizes this is astronomically large (trimming never fires);
/// it is provided for completeness and theory-mode experiments.
pub fn theory_tau(mu: f64, c: f64, kappa: f64, r: usize) -> f64 {
    (2.0 * mu * r as f64 / (c * c) * kappa * kappa).powi(5)
}

/// Sparse symmetric reweighted Gram matrix of an unfolding, in CSR form.
#[derive(Debug, Clone)]
pub struct ImplicitGram {
    n: usize,
    p1: f64,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    emitted_pairs: usize,
}

impl ImplicitGram {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p1(&self) -> f64 {
        self.p1
    }

    /// Total pair updates emitted during construction, i.e. the sum of
    /// squared fiber counts.
    pub fn emitted_pairs(&self) -> usize {
        self.emitted_pairs
    }

    /// Distinct stored coordinates (full symmetric pattern).
    pub fn stored_nnz(&self) -> usize {
        self.values.len()
    }

    /// Dense view for oracle comparisons at small n.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        if self.n > DENSE_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "refusing to densify {}x{} Gram matrix",
                self.n, self.n
            )));
        }
        let mut out = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for t in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[(i, self.col_idx[t] as usize)] = self.values[t];
            }
        }
        Ok(out)
    }
}

impl LinOp for ImplicitGram {
    fn nrows(&self) -> usize {
        self.n
    }

    fn ncols(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.n, x.ncols());
        for col in 0..x.ncols() {
            for i in 0..self.n {
                let mut acc = 0.0;
                for t in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.values[t] * x[(self.col_idx[t] as usize, col)];
                }
                y[(i, col)] = acc;
            }
        }
        y
    }

    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        // symmetric by construction
        self.apply(x)
    }
}

/// Assemble the reweighted Gram matrix of the mode unfolding from the
/// observations alone: group by fiber, emit all within-fiber pairs, scale
/// the diagonal by `1/p1` and off-diagonal entries by `1/p1^2`.
pub fn build_bhat(obs: &ObservationSet, mode: Mode, p1: f64, max_entries: usize) -> Result<ImplicitGram> {
    if obs.is_empty() {
        return Err(Error::InvalidArgument("cannot build second-moment matrix from empty observations".into()));
    }
    if !(p1 > 0.0 && p1 <= 1.0) {
        return Err(Error::InvalidArgument(format!("p1 = {} outside (0, 1]", p1)));
    }
    let (n1, n2, n3) = obs.dims();
    let n = match mode {
        Mode::X => n1,
        Mode::Y => n2,
        Mode::Z => n3,
    };

    // (fiber_c1, fiber_c2, row, value), sorted so fibers are contiguous
    let mut items: Vec<(u32, u32, u32, f64)> = obs
        .entries()
        .iter()
        .map(|e| {
            let (row, c1, c2) = mode.permute(e.i as usize, e.j as usize, e.k as usize);
            (c1 as u32, c2 as u32, row as u32, e.value)
        })
        .collect();
    items.sort_unstable_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));

    let diag_w = 1.0 / p1;
    let off_w = 1.0 / (p1 * p1);
    let mut acc: HashMap<(u32, u32), f64> = HashMap::new();
    let mut emitted = 0usize;
    let mut start = 0;
    while start < items.len() {
        let fiber = (items[start].0, items[start].1);
        let mut end = start + 1;
        while end < items.len() && (items[end].0, items[end].1) == fiber {
            end += 1;
        }
        let members = &items[start..end];
        emitted += members.len() * members.len();
        for (a, &(_, _, ia, va)) in members.iter().enumerate() {
            *acc.entry((ia, ia)).or_insert(0.0) += va * va * diag_w;
            for &(_, _, ib, vb) in &members[a + 1..] {
                let key = if ia <= ib { (ia, ib) } else { (ib, ia) };
                *acc.entry(key).or_insert(0.0) += va * vb * off_w;
            }
        }
        if acc.len() > max_entries {
            return Err(Error::Budget(format!(
                "second-moment matrix exceeded {} stored entries",
                max_entries
            )));
        }
        start = end;
    }

    // expand to the full symmetric pattern and pack as CSR
    let mut coords: Vec<(u32, u32, f64)> = Vec::with_capacity(acc.len() * 2);
    for (&(i, j), &w) in &acc {
        coords.push((i, j, w));
        if i != j {
            coords.push((j, i, w));
        }
    }
    coords.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut row_ptr = vec![0usize; n + 1];
    let mut col_idx = Vec::with_capacity(coords.len());
    let mut values = Vec::with_capacity(coords.len());
    for (i, j, w) in coords {
        row_ptr[i as usize + 1] += 1;
        col_idx.push(j);
        values.push(w);
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    Ok(ImplicitGram { n, p1, row_ptr, col_idx, values, emitted_pairs: emitted })
}

/// Zero out rows whose norm is at least `tau * sqrt(r/n)`.
pub fn trim_rows(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let (n, r) = (x.nrows(), x.ncols());
    let threshold = tau * (r as f64 / n as f64).sqrt();
    let mut out = x.clone();
    for i in 0..n {
        if x.row(i).norm() >= threshold {
            out.row_mut(i).fill(0.0);
        }
    }
    out
}

/// Full initialization: per mode, build the second-moment matrix, extract
/// the top-r eigenvector block, trim heavy rows and return the span.
pub fn init_subspaces(obs: &ObservationSet, cfg: &InitConfig) -> Result<SubspaceTriple> {
    let mut bases = Vec::with_capacity(3);
    for (idx, mode) in Mode::ALL.into_iter().enumerate() {
        let gram = build_bhat(obs, mode, obs.p(), cfg.max_gram_entries)?;
        let power = PowerConfig {
            max_iters: cfg.power_iters,
            tol: cfg.power_tol,
            seed: derive_seed(cfg.seed, idx as u64),
        };
        let basis = top_r_left_singular_basis(&gram, cfg.rank, &power)?;
        let trimmed = trim_rows(basis.matrix(), cfg.tau);
        let span = orthonormal_span(&trimmed).map_err(|_| {
            Error::Degenerate(format!(
                "row trimming left the mode-{} eigenvector block rank-deficient",
                mode
            ))
        })?;
        bases.push(span);
    }
    let vz = bases.pop().expect("three bases");
    let vy = bases.pop().expect("three bases");
    let vx = bases.pop().expect("three bases");
    SubspaceTriple::new(vx, vy, vz)
}
