//! Exact-recovery post-processing: project the observations onto the
//! product of the estimated subspaces, then refine decomposed components by
//! constrained convex optimization over a small perturbation polytope.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::sampling::ObservationSet;
use crate::subspace::SubspaceTriple;
use crate::tensor::{CPDecomposition, DenseTensor3, EntrySource, Mode, DENSE_LIMIT};

/// A tensor expressed in the coordinates of a subspace triple:
/// `T' = sum_{a,b,c} core[a,b,c] vx_a ⊗ vy_b ⊗ vz_c`.
#[derive(Debug, Clone)]
pub struct CoreTensor {
    triple: SubspaceTriple,
    core: Vec<f64>, // index (a*r + b)*r + c
}

impl CoreTensor {
    pub fn new(triple: SubspaceTriple, core: Vec<f64>) -> Result<Self> {
        let r = triple.r();
        if core.len() != r * r * r {
            return Err(Error::Dimension(format!(
                "core must hold {} coefficients, got {}",
                r * r * r,
                core.len()
            )));
        }
        if core.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("core coefficients must be finite".into()));
        }
        Ok(Self { triple, core })
    }

    pub fn r(&self) -> usize {
        self.triple.r()
    }

    pub fn n(&self) -> usize {
        self.triple.n()
    }

    pub fn triple(&self) -> &SubspaceTriple {
        &self.triple
    }

    pub fn core(&self) -> &[f64] {
        &self.core
    }

    #[inline]
    pub fn core_at(&self, a: usize, b: usize, c: usize) -> f64 {
        let r = self.triple.r();
        self.core[(a * r + b) * r + c]
    }

    /// Frobenius norm; equals the core norm because the bases are
    /// orthonormal.
    pub fn frobenius_norm(&self) -> f64 {
        self.core.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `||T' - truth||_F / ||truth||_F` through r x r_t Gram matrices.
    pub fn normalized_mse_vs(&self, truth: &CPDecomposition) -> Result<f64> {
        if self.n() != truth.n() {
            return Err(Error::Dimension(format!("dims differ: {} vs {}", self.n(), truth.n())));
        }
        let r = self.r();
        let gx = self.triple.vx().matrix().transpose() * truth.factor(Mode::X);
        let gy = self.triple.vy().matrix().transpose() * truth.factor(Mode::Y);
        let gz = self.triple.vz().matrix().transpose() * truth.factor(Mode::Z);
        let mut cross = 0.0;
        for (t, &sigma) in truth.sigmas().iter().enumerate() {
            let mut acc = 0.0;
            for a in 0..r {
                let ga = gx[(a, t)];
                for b in 0..r {
                    let gab = ga * gy[(b, t)];
                    for c in 0..r {
                        acc += self.core_at(a, b, c) * gab * gz[(c, t)];
                    }
                }
            }
            cross += sigma * acc;
        }
        let tnorm = truth.frobenius_norm();
        if tnorm == 0.0 {
            return Err(Error::InvalidArgument("truth tensor has zero norm".into()));
        }
        let self_sq: f64 = self.core.iter().map(|v| v * v).sum();
        let diff_sq = (self_sq - 2.0 * cross + tnorm * tnorm).max(0.0);
        Ok(diff_sq.sqrt() / tnorm)
    }

    /// Dense materialization; refuses above [`DENSE_LIMIT`].
    pub fn materialize(&self) -> Result<DenseTensor3> {
        let n = self.n();
        if n > DENSE_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "refusing to materialize n={} > {} core tensor",
                n, DENSE_LIMIT
            )));
        }
        let r = self.r();
        let vx = self.triple.vx().matrix();
        let vy = self.triple.vy().matrix();
        let vz = self.triple.vz().matrix();
        let mut values = vec![0.0; n * n * n];
        for a in 0..r {
            for b in 0..r {
                for c in 0..r {
                    let w = self.core_at(a, b, c);
                    if w == 0.0 {
                        continue;
                    }
                    let mut idx = 0;
                    for i in 0..n {
                        let wa = w * vx[(i, a)];
                        for j in 0..n {
                            let wab = wa * vy[(j, b)];
                            for k in 0..n {
                                values[idx] += wab * vz[(k, c)];
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        DenseTensor3::new((n, n, n), values)
    }
}

impl EntrySource for CoreTensor {
    fn dims(&self) -> (usize, usize, usize) {
        (self.n(), self.n(), self.n())
    }

    fn entry(&self, i: usize, j: usize, k: usize) -> f64 {
        let r = self.r();
        let vx = self.triple.vx().matrix();
        let vy = self.triple.vy().matrix();
        let vz = self.triple.vz().matrix();
        let mut acc = 0.0;
        for a in 0..r {
            let xa = vx[(i, a)];
            for b in 0..r {
                let xab = xa * vy[(j, b)];
                for c in 0..r {
                    acc += self.core_at(a, b, c) * xab * vz[(k, c)];
                }
            }
        }
        acc
    }
}

const PROJECT_RIDGE_REL: f64 = 1e-12;

/// Least-squares projection of the observed entries onto the product of
/// the estimated subspaces: each observation contributes one row
/// `(row i of Vx) ⊗ (row j of Vy) ⊗ (row k of Vz)` to an implicit design
/// matrix over the r^3 core coefficients.
pub fn project_to_subspaces(obs: &ObservationSet, triple: &SubspaceTriple) -> Result<CoreTensor> {
    if obs.is_empty() {
        return Err(Error::InvalidArgument("projection needs observations".into()));
    }
    let r = triple.r();
    let d = r * r * r;
    let vx = triple.vx().matrix();
    let vy = triple.vy().matrix();
    let vz = triple.vz().matrix();

    const CHUNK: usize = 1024;
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut block = DMatrix::<f64>::zeros(CHUNK, d);
    let mut vals = DVector::<f64>::zeros(CHUNK);
    for chunk in obs.entries().chunks(CHUNK) {
        let m = chunk.len();
        for (row, e) in chunk.iter().enumerate() {
            let (i, j, k) = (e.i as usize, e.j as usize, e.k as usize);
            for a in 0..r {
                let xa = vx[(i, a)];
                for b in 0..r {
                    let xab = xa * vy[(j, b)];
                    let base = (a * r + b) * r;
                    for c in 0..r {
                        block[(row, base + c)] = xab * vz[(k, c)];
                    }
                }
            }
            vals[row] = e.value;
        }
        let bview = block.rows(0, m);
        gram.gemm_tr(1.0, &bview, &bview, 1.0);
        rhs.gemv_tr(1.0, &bview, &vals.rows(0, m), 1.0);
    }

    let ridge = PROJECT_RIDGE_REL * gram.trace() / d as f64;
    let eig_min = nalgebra::SymmetricEigen::new(gram.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if eig_min < 1e3 * ridge {
        return Err(Error::IllConditioned(format!(
            "projection normal equations nearly singular (min eigenvalue {:.3e}, ridge {:.3e})",
            eig_min, ridge
        )));
    }
    let mut reg = gram;
    for i in 0..d {
        reg[(i, i)] += ridge;
    }
    let core = reg
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("projection normal equations not positive definite".into()))?
        .solve(&rhs);
    CoreTensor::new(triple.clone(), core.iter().cloned().collect())
}

/// The feasible set of the refinement: an infinity-norm box on every
/// perturbation vector plus dual-basis orthogonality constraints that pin
/// the scale redundancy of the y and z factors.
#[derive(Debug, Clone)]
pub struct RefinePolytope {
    pub box_bound: f64,
    /// Column i is the unit vector in span(Y) orthogonal to all other
    /// estimated y factors.
    pub y_primes: DMatrix<f64>,
    pub z_primes: DMatrix<f64>,
    pub anchors: CPDecomposition,
}

/// The box bound from the analysis, `(c sigma_r / (10 n sigma_1))^10`;
/// underflows at practical sizes, so refinement takes the bound as a knob.
pub fn theory_box_bound(c: f64, sigma_r: f64, sigma_1: f64, n: usize) -> f64 {
    (c * sigma_r / (10.0 * n as f64 * sigma_1)).powi(10)
}

fn dual_basis(factors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = factors.transpose() * factors;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("factor Gram matrix is singular".into()))?;
    let mut dual = factors * inv;
    for c in 0..dual.ncols() {
        let norm = dual.column(c).norm();
        if norm == 0.0 {
            return Err(Error::Degenerate("dual basis column vanished".into()));
        }
        dual.column_mut(c).scale_mut(1.0 / norm);
    }
    Ok(dual)
}

/// Build the polytope around an estimated decomposition. The dual vectors
/// are the normalized columns of `Y (Y^T Y)^{-1}`, verified to be unit, in
/// span, and orthogonal to the other factors to 1e-10.
pub fn build_polytope(est: &CPDecomposition, box_bound: f64) -> Result<RefinePolytope> {
    if !(box_bound > 0.0) {
        return Err(Error::InvalidArgument("box bound must be positive".into()));
    }
    let y_primes = dual_basis(est.factor(Mode::Y))?;
    let z_primes = dual_basis(est.factor(Mode::Z))?;
    for (primes, factors) in [(&y_primes, est.factor(Mode::Y)), (&z_primes, est.factor(Mode::Z))] {
        let r = primes.ncols();
        for i in 0..r {
            if (primes.column(i).norm() - 1.0).abs() > 1e-10 {
                return Err(Error::Degenerate("dual vector not unit".into()));
            }
            for j in 0..r {
                if i != j && primes.column(i).dot(&factors.column(j)).abs() > 1e-10 {
                    return Err(Error::Degenerate(format!(
                        "dual vector {} not orthogonal to factor {}",
                        i, j
                    )));
                }
            }
        }
    }
    Ok(RefinePolytope { box_bound, y_primes, z_primes, anchors: est.clone() })
}

/// Solver controls for the projected-gradient refinement.
#[derive(Debug, Clone)]
pub struct RefineOptions {
    pub max_iters: usize,
    /// Convergence threshold on the projected-gradient mapping norm.
    pub grad_tol: f64,
    /// The step is `1 / (step_safety * L)` with L estimated by power
    /// iteration on the Gauss-Newton Hessian at the anchor.
    pub step_safety: f64,
    pub seed: u64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { max_iters: 100_000, grad_tol: 1e-11, step_safety: 2.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub refined: CPDecomposition,
    pub iterations: usize,
    pub objective: f64,
    /// Some perturbation coordinate ended on the box boundary — a sign the
    /// anchors were too far from the truth for the chosen box.
    pub hit_box_boundary: bool,
}

struct Perturbation {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

fn mat_axpy(dst: &mut DMatrix<f64>, alpha: f64, src: &DMatrix<f64>) {
    dst.zip_apply(src, |d, s| *d += alpha * s);
}

impl Perturbation {
    fn zeros(n: usize, r: usize) -> Self {
        Self { a: DMatrix::zeros(n, r), b: DMatrix::zeros(n, r), c: DMatrix::zeros(n, r) }
    }

    fn axpy(&mut self, alpha: f64, other: &Perturbation) {
        mat_axpy(&mut self.a, alpha, &other.a);
        mat_axpy(&mut self.b, alpha, &other.b);
        mat_axpy(&mut self.c, alpha, &other.c);
    }

    fn norm(&self) -> f64 {
        (self.a.norm_squared() + self.b.norm_squared() + self.c.norm_squared()).sqrt()
    }
}

const FEASIBILITY_TOL: f64 = 1e-14;
const PROJECTION_ROUNDS: usize = 200;

/// Project onto the box intersected with the dual-orthogonality
/// hyperplanes: alternate entrywise clamping with removal of the dual
/// components, switching to Dykstra-style corrections if plain alternation
/// stalls.
fn project_feasible(vars: &mut Perturbation, poly: &RefinePolytope) -> Result<()> {
    let clamp = |m: &mut DMatrix<f64>, bound: f64| {
        for v in m.iter_mut() {
            *v = v.clamp(-bound, bound);
        }
    };
    let deflate = |m: &mut DMatrix<f64>, primes: &DMatrix<f64>| {
        for i in 0..m.ncols() {
            let dot = m.column(i).dot(&primes.column(i));
            let p = primes.column(i).into_owned();
            m.column_mut(i).axpy(-dot, &p, 1.0);
        }
    };
    let violation = |vars: &Perturbation| -> f64 {
        let mut worst: f64 = 0.0;
        for m in [&vars.a, &vars.b, &vars.c] {
            for v in m.iter() {
                worst = worst.max(v.abs() - poly.box_bound);
            }
        }
        for (m, primes) in [(&vars.b, &poly.y_primes), (&vars.c, &poly.z_primes)] {
            for i in 0..m.ncols() {
                worst = worst.max(m.column(i).dot(&primes.column(i)).abs());
            }
        }
        worst
    };

    for _ in 0..PROJECTION_ROUNDS {
        clamp(&mut vars.a, poly.box_bound);
        clamp(&mut vars.b, poly.box_bound);
        clamp(&mut vars.c, poly.box_bound);
        deflate(&mut vars.b, &poly.y_primes);
        deflate(&mut vars.c, &poly.z_primes);
        if violation(vars) < FEASIBILITY_TOL {
            return Ok(());
        }
    }
    // Dykstra-style corrected alternation for stubborn geometry
    let mut p_box = Perturbation::zeros(vars.a.nrows(), vars.a.ncols());
    let mut p_plane = Perturbation::zeros(vars.a.nrows(), vars.a.ncols());
    for _ in 0..PROJECTION_ROUNDS {
        let before_box = Perturbation { a: vars.a.clone(), b: vars.b.clone(), c: vars.c.clone() };
        vars.axpy(1.0, &p_box);
        clamp(&mut vars.a, poly.box_bound);
        clamp(&mut vars.b, poly.box_bound);
        clamp(&mut vars.c, poly.box_bound);
        p_box = before_box;
        p_box.axpy(-1.0, vars);
        p_box.a.neg_mut();
        p_box.b.neg_mut();
        p_box.c.neg_mut();

        let before_plane = Perturbation { a: vars.a.clone(), b: vars.b.clone(), c: vars.c.clone() };
        vars.axpy(1.0, &p_plane);
        deflate(&mut vars.b, &poly.y_primes);
        deflate(&mut vars.c, &poly.z_primes);
        p_plane = before_plane;
        p_plane.axpy(-1.0, vars);
        p_plane.a.neg_mut();
        p_plane.b.neg_mut();
        p_plane.c.neg_mut();

        if violation(vars) < FEASIBILITY_TOL {
            return Ok(());
        }
    }
    Err(Error::SolverFailure("feasibility projection did not reach tolerance".into()))
}

/// Objective and gradient of the observed-entry squared residual at the
/// given perturbation.
fn objective_and_gradient(
    obs: &ObservationSet,
    poly: &RefinePolytope,
    vars: &Perturbation,
    grad: &mut Perturbation,
) -> f64 {
    let anchors = &poly.anchors;
    let r = anchors.rank();
    let sig = anchors.sigmas();
    let x = anchors.factor(Mode::X) + &vars.a;
    let y = anchors.factor(Mode::Y) + &vars.b;
    let z = anchors.factor(Mode::Z) + &vars.c;
    grad.a.fill(0.0);
    grad.b.fill(0.0);
    grad.c.fill(0.0);
    let mut obj = 0.0;
    for e in obs.entries() {
        let (i, j, k) = (e.i as usize, e.j as usize, e.k as usize);
        let mut model = 0.0;
        for t in 0..r {
            model += sig[t] * x[(i, t)] * y[(j, t)] * z[(k, t)];
        }
        let res = model - e.value;
        obj += res * res;
        let two_res = 2.0 * res;
        for t in 0..r {
            let st = sig[t] * two_res;
            grad.a[(i, t)] += st * y[(j, t)] * z[(k, t)];
            grad.b[(j, t)] += st * x[(i, t)] * z[(k, t)];
            grad.c[(k, t)] += st * x[(i, t)] * y[(j, t)];
        }
    }
    obj
}

/// Largest eigenvalue of the Gauss-Newton Hessian `2 J^T J` at the anchor,
/// by power iteration.
fn estimate_smoothness(obs: &ObservationSet, poly: &RefinePolytope, seed: u64) -> f64 {
    let anchors = &poly.anchors;
    let n = anchors.n();
    let r = anchors.rank();
    let sig = anchors.sigmas();
    let x = anchors.factor(Mode::X);
    let y = anchors.factor(Mode::Y);
    let z = anchors.factor(Mode::Z);
    let mut rng = rng_from_seed(seed);
    let mut v = Perturbation {
        a: DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)),
        b: DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)),
        c: DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)),
    };
    let mut lambda = 1.0;
    for _ in 0..40 {
        let norm = v.norm();
        if norm == 0.0 {
            break;
        }
        v.a /= norm;
        v.b /= norm;
        v.c /= norm;
        let mut hv = Perturbation::zeros(n, r);
        for e in obs.entries() {
            let (i, j, k) = (e.i as usize, e.j as usize, e.k as usize);
            let mut jv = 0.0;
            for t in 0..r {
                jv += sig[t]
                    * (v.a[(i, t)] * y[(j, t)] * z[(k, t)]
                        + x[(i, t)] * v.b[(j, t)] * z[(k, t)]
                        + x[(i, t)] * y[(j, t)] * v.c[(k, t)]);
            }
            let two_jv = 2.0 * jv;
            for t in 0..r {
                let st = sig[t] * two_jv;
                hv.a[(i, t)] += st * y[(j, t)] * z[(k, t)];
                hv.b[(j, t)] += st * x[(i, t)] * z[(k, t)];
                hv.c[(k, t)] += st * x[(i, t)] * y[(j, t)];
            }
        }
        lambda = hv.norm();
        v = hv;
    }
    lambda.max(f64::MIN_POSITIVE)
}

/// Minimize the observed squared residual over the polytope by projected
/// gradient descent with a fixed `1/(safety * L)` step.
pub fn convex_refine(obs: &ObservationSet, poly: &RefinePolytope, opts: &RefineOptions) -> Result<RefineOutcome> {
    if obs.is_empty() {
        return Err(Error::InvalidArgument("refinement needs observations".into()));
    }
    let n = poly.anchors.n();
    let r = poly.anchors.rank();
    let smoothness = estimate_smoothness(obs, poly, opts.seed);
    let step = 1.0 / (opts.step_safety * smoothness);

    let mut vars = Perturbation::zeros(n, r);
    project_feasible(&mut vars, poly)?;
    let mut grad = Perturbation::zeros(n, r);
    let mut objective = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        objective = objective_and_gradient(obs, poly, &vars, &mut grad);
        let mut candidate = Perturbation {
            a: vars.a.clone(),
            b: vars.b.clone(),
            c: vars.c.clone(),
        };
        candidate.axpy(-step, &grad);
        project_feasible(&mut candidate, poly)?;
        let movement = Perturbation {
            a: &candidate.a - &vars.a,
            b: &candidate.b - &vars.b,
            c: &candidate.c - &vars.c,
        };
        let mapping_norm = movement.norm() / step;
        vars = candidate;
        if mapping_norm < opts.grad_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SolverFailure(format!(
            "projected gradient did not converge within {} iterations (objective {:.3e})",
            opts.max_iters, objective
        )));
    }

    let boundary_eps = 1e-12 * poly.box_bound.max(f64::MIN_POSITIVE);
    let hit_box_boundary = [&vars.a, &vars.b, &vars.c]
        .iter()
        .any(|m| m.iter().any(|v| poly.box_bound - v.abs() <= boundary_eps));

    let anchors = &poly.anchors;
    let refined = CPDecomposition::from_components(
        anchors.sigmas().to_vec(),
        anchors.factor(Mode::X) + &vars.a,
        anchors.factor(Mode::Y) + &vars.b,
        anchors.factor(Mode::Z) + &vars.c,
    )?;
    Ok(RefineOutcome { refined, iterations, objective, hit_box_boundary })
}

/// Objective value at a given feasible perturbation; used by convexity
/// probes and tests.
pub fn refine_objective(obs: &ObservationSet, poly: &RefinePolytope, a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    let anchors = &poly.anchors;
    let r = anchors.rank();
    let sig = anchors.sigmas();
    let x = anchors.factor(Mode::X) + a;
    let y = anchors.factor(Mode::Y) + b;
    let z = anchors.factor(Mode::Z) + c;
    let mut obj = 0.0;
    for e in obs.entries() {
        let (i, j, k) = (e.i as usize, e.j as usize, e.k as usize);
        let mut model = 0.0;
        for t in 0..r {
            model += sig[t] * x[(i, t)] * y[(j, t)] * z[(k, t)];
        }
        let res = model - e.value;
        obj += res * res;
    }
    obj
}

/// Objective trace of a refinement run, for descent diagnostics: replays
/// the same projected-gradient iteration and records the objective value
/// at every step.
pub fn refine_objective_trace(
    obs: &ObservationSet,
    poly: &RefinePolytope,
    opts: &RefineOptions,
    max_record: usize,
) -> Result<Vec<f64>> {
    let n = poly.anchors.n();
    let r = poly.anchors.rank();
    let smoothness = estimate_smoothness(obs, poly, opts.seed);
    let step = 1.0 / (opts.step_safety * smoothness);
    let mut vars = Perturbation::zeros(n, r);
    project_feasible(&mut vars, poly)?;
    let mut grad = Perturbation::zeros(n, r);
    let mut trace = Vec::new();
    for _ in 0..max_record {
        let obj = objective_and_gradient(obs, poly, &vars, &mut grad);
        trace.push(obj);
        vars.axpy(-step, &grad);
        project_feasible(&mut vars, poly)?;
    }
    Ok(trace)
}
