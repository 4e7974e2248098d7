//! Low-rank third-order tensor completion from sparse Bernoulli samples.
//!
//! The pipeline has four stages: independent sample splitting, spectral
//! initialization of the factor subspaces, Kronecker alternating
//! minimization, and exact-recovery post-processing (subspace projection,
//! simultaneous-diagonalization decomposition, constrained convex
//! refinement). A benchmark harness drives the synthetic experiment
//! families and emits CSV/JSON traces.

pub mod altmin;
pub mod error;
pub mod harness;
pub mod jennrich;
pub mod linalg;
pub mod postprocess;
pub mod rng;
pub mod sampling;
pub mod spectral;
pub mod subspace;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use subspace::{principal_angle_sine, SubspaceBasis, SubspaceTriple};
pub use tensor::{CPDecomposition, DenseTensor3, Mode};
