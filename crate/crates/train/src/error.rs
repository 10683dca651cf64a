use std::path::PathBuf;

use afa_core::CoreError;
use afa_models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("incompatible inputs: {0}")]
    Mismatch(String),
    #[error("schema error in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl TrainError {
    /// Whether the error stems from invalid input rather than a failure
    /// while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Config(_)
                | Self::Mismatch(_)
                | Self::Schema { .. }
                | Self::Model(ModelError::VersionMismatch { .. })
                | Self::Model(ModelError::Config(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}
