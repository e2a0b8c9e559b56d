//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration constraint was violated; the message names it.
    #[error("configuration error: {0}")]
    Config(String),

    /// A sequence index fell outside its valid range.
    #[error("index {index} out of range [0, {len})")]
    IndexOutOfRange { index: usize, len: usize },

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Saved activations do not match the tensors handed to backward.
    #[error("stale saved state: {0}")]
    State(String),

    /// A serialized artifact (checkpoint, config file) could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
