use std::path::PathBuf;

use afa_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("unused parameters in checkpoint: {0:?}")]
    UnusedParams(Vec<String>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty rollout")]
    EmptyRollout,
    #[error("filter state used before reset")]
    NotReset,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{what} mismatch: expected {expected}, found {found}")]
    VersionMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;
