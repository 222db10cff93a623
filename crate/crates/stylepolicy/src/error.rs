//! Crate-wide error types.

use thiserror::Error;

/// Errors produced while decoding PPM image files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PpmError {
    #[error("not a binary PPM (P6) file")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{0} trailing bytes after pixel payload")]
    TrailingBytes(usize),
}

/// Errors produced while decoding checkpoint blobs.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint registry does not match: {0}")]
    RegistryMismatch(String),
}

/// Errors produced while loading or validating policy documents.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyFileError {
    #[error("unsupported policy format version {0}")]
    Version(u32),
    #[error("policy registry does not match: {0}")]
    RegistryMismatch(String),
    #[error("invalid policy document: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch at node {node}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{pool} pool exhausted")]
    PoolExhausted { pool: &'static str },
    #[error(transparent)]
    Ppm(#[from] PpmError),
    #[error(transparent)]
    PolicyFile(#[from] PolicyFileError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
