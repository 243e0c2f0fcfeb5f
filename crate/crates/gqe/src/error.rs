//! Error type shared across the crate.

use thiserror::Error;

/// Unified error for store, graph, expansion, training and evaluation code.
#[derive(Debug, Error)]
pub enum GqeError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file failed structural validation (bad magic, truncated payload,
    /// unsupported version, unparsable text).
    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero vector at row {0} cannot be normalized")]
    ZeroVector(usize),

    /// A caller-supplied argument violates a precondition (k out of range,
    /// missing labels, empty neighbor list, exhausted negative pool, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A cached artifact does not correspond to the inputs it is used with.
    #[error("stale cache: {0}")]
    StaleCache(String),
}

pub type Result<T> = std::result::Result<T, GqeError>;

impl GqeError {
    /// Exit code class for the command-line front end: usage errors map to 1,
    /// everything data-related maps to 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, GqeError::InvalidInput(_))
    }
}
