use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments outside an operation's domain (bad shapes, lengths, ranges).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    /// Misuse of stateful APIs, e.g. running backward twice on one forward trace.
    #[error("state error: {0}")]
    State(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite loss {loss} at batch {batch}")]
    NonFinite { batch: usize, loss: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
