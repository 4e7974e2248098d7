use thiserror::Error;

/// Errors produced by the completion library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sampling budget exceeded: {0}")]
    Budget(String),

    #[error("power iteration did not converge: subspace movement {movement:.3e} after {iterations} iterations (singular gap too small)")]
    NonConvergence { iterations: usize, movement: f64 },

    #[error("eigenvalue separation failed after {attempts} contraction retries (min gap {min_gap:.3e})")]
    EigenvalueCollision { attempts: usize, min_gap: f64 },

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("solver did not converge: {0}")]
    SolverFailure(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
