use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// The byte stream does not follow the tensor container layout.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input that violates a domain invariant (non-finite data,
    /// mismatched shapes, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("plan corruption at (batch {batch}, query block {query_block}, head {head}): {reason}")]
    PlanCorruption {
        batch: usize,
        query_block: usize,
        head: usize,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("out of bounds: {0}")]
    Bounds(String),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
