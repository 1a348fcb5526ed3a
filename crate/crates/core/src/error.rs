//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the detection library.
#[derive(Debug, Error)]
pub enum Error {
    /// Unsupported QAM order was requested.
    #[error("unsupported QAM order {0}; supported orders are 4, 16, 64")]
    UnsupportedOrder(usize),

    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Shapes of the supplied operands are inconsistent.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Conjugate-gradient breakdown: the operator is not positive definite
    /// (or the iteration hit a numerical zero curvature direction).
    #[error("CG breakdown at iteration {iter}: p^T A p = {curvature}")]
    CgBreakdown { iter: usize, curvature: f64 },

    /// A non-finite value appeared during detection.
    #[error("non-finite value in detector layer {layer}: {what}")]
    NonFinite { layer: usize, what: String },

    /// A matrix decomposition failed.
    #[error("decomposition failure: {0}")]
    Decomposition(String),

    /// The brute-force search space exceeds the configured guard.
    #[error("search space of {size} candidates exceeds the limit of {limit}")]
    SearchSpace { size: u128, limit: u128 },

    /// A text file (taps, params, config) failed to parse.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    /// Configuration field failed validation.
    #[error("config error: field `{field}`: {msg}")]
    Config { field: String, msg: String },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
