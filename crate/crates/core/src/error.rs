use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid environment descriptor: {0}")]
    InvalidDescriptor(String),

    #[error("feature mask has length {got}, expected {expected}")]
    MaskLength { expected: usize, got: usize },

    #[error("control index {index} out of range for {n} control actions")]
    InvalidControl { index: usize, n: usize },

    #[error("observation length {got} does not match descriptor length {expected}")]
    ObservationLength { expected: usize, got: usize },

    #[error("step called on an environment that has not been reset")]
    NotReset,

    #[error("step called after the episode terminated")]
    EpisodeOver,

    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),

    #[error("sequence lengths differ: rewards {rewards}, costs {costs}")]
    LengthMismatch { rewards: usize, costs: usize },

    #[error("dynamics file {path}: {reason}")]
    Dynamics { path: String, reason: String },

    #[error("trajectory {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("dataset integrity error: {0}")]
    Integrity(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.display().to_string(),
        source,
    }
}
