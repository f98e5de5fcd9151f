//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by corpus generation, model math, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed a value that violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration document failed validation. Carries every violation
    /// found, not just the first.
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    /// Filesystem or serialization failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A persisted artifact failed an integrity or compatibility check
    /// (hash mismatch, shape mismatch, version skew).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Training produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(vec![msg.into()])
    }
}

pub type Result<T> = std::result::Result<T, Error>;
