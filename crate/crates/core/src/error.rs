use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("record `{record}`: {msg}")]
    InvalidRecord { record: String, msg: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: expected row width {expected}, found {found}")]
    WidthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: non-finite value in row {row}")]
    NonFinite { path: PathBuf, row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint fingerprint {found} does not match configuration fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
