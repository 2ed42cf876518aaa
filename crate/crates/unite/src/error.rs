//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UniteError {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    /// Operation attempted in an invalid state (e.g. backward on a frozen tape).
    #[error("state error: {0}")]
    State(String),

    /// Non-finite values where finite ones are required (NaN loss, NaN grads, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An index (class label, parameter id, ...) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Missing prerequisite artifact, with the command that produces it.
    #[error("setup error: {0}")]
    Setup(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed tensor file or checkpoint.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, UniteError>;
