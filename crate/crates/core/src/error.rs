//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file; carries the 1-based line number.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    /// Input violates a mathematical precondition (negative weight,
    /// CES domain, invalid parameter range, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Design or instrument matrix is rank deficient.
    #[error("rank error: {0}")]
    Rank(String),
    /// Operation not defined for the requested aggregator family.
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    /// Estimation-level failure that is not a rank problem.
    #[error("estimation error: {0}")]
    Estimation(String),
    /// Solver failed to converge where convergence is required.
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
