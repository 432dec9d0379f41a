use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("corrupt artifact {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
