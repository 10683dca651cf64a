//! Imputation, latent-state and actor-critic models for active feature
//! acquisition.

pub mod checkpoint;
pub mod elbo;
pub mod encoding;
pub mod error;
pub mod nn;
pub mod optim;
pub mod params;
pub mod policy;
pub mod vae;

pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
pub use elbo::{elbo, ElboDiagnostics, ElboOutput, SeqBatch, SupervisionMode};
pub use encoding::{action_dim, encode_action, zero_impute, ImputerConfig};
pub use error::{ModelError, Result};
pub use params::{Init, ParamSource, ParamStore};
pub use policy::{a3c_loss, A3cHyper, A3cLoss, ActMode, ActorCritic, Decision, PolicyConfig, PolicyInput, Rollout};
pub use vae::{FilterState, LatentDistribution, Likelihood, Vae, VaeConfig, VaeKind};
