use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: corrupt checkpoint header: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("{path}: unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: payload length {found} bytes, directory needs {expected}")]
    PayloadLength { path: PathBuf, found: usize, expected: usize },

    #[error("required array `{0}` is absent")]
    MissingArray(String),

    #[error("array `{name}` has shape {found:?}, config implies {expected:?}")]
    ArrayShape { name: String, found: (usize, usize), expected: (usize, usize) },

    #[error("unexpected array `{0}` for this config and stage")]
    UnexpectedArray(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
