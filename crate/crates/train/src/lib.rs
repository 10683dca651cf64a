//! Data collection, VAE pre-training, joint policy training and evaluation
//! for active feature acquisition.

pub mod agent;
pub mod collect;
pub mod config;
pub mod envs;
pub mod error;
pub mod evaluation;
pub mod joint;
pub mod metrics;
pub mod plots;
pub mod pretrain;

pub use config::{AcquisitionMode, ExperimentConfig};
pub use envs::EnvFactory;
pub use error::{Result, TrainError};
