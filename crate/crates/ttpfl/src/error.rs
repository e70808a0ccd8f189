//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by kernel operations, adaptation, simulation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value became (or arrived) non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Batch too small for batch statistics.
    #[error("degenerate batch: need at least {needed} samples, got {got}")]
    DegenerateBatch { needed: usize, got: usize },

    /// API misuse, e.g. a stale forward cache or mismatched manifest.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid configuration, with the offending field named.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
