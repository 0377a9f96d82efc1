//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants separate bad user input, structural
/// graph problems, run configuration mistakes, numeric failures and
/// training divergence so callers can map them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data (CSV cells, ids, coordinates).
    #[error("input error: {0}")]
    Input(String),

    /// Structural problem with the patch graph (isolated patch, asymmetry).
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid run configuration (split ratios, window lengths, unknown keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Optimization failure, e.g. loss became NaN.
    #[error("training error: {0}")]
    Training(String),

    /// Shape mismatch or other internal contract violation.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
