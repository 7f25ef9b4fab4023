//! Error types for fallible operations: file I/O, config parsing,
//! checkpointing, and training-time abort conditions.
//!
//! Shape and contract violations inside the tensor engine are programmer
//! errors and panic with a message carrying the offending shapes instead.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum XmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {term} at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, XmError>;

impl XmError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        XmError::Io { path: path.into(), source }
    }
}
