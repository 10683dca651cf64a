//! Core contract for active feature acquisition POMDPs: descriptors, joint
//! actions, masked observations, cost accounting, trajectory records and the
//! two reference environments.

pub mod bouncing_ball;
pub mod cost;
pub mod dataset;
pub mod env;
pub mod error;
pub mod record;
pub mod seed;
pub mod sepsis;
pub mod types;

pub use cost::{acquisition_cost, discounted_return, CostModel};
pub use dataset::{Dataset, DatasetHeader};
pub use env::{EnvKind, Environment};
pub use error::{CoreError, Result};
pub use record::TrajectoryRecord;
pub use types::{
    EnvDescriptor, FeatureMask, JointAction, MaskedObservation, Outcome, StepResult,
};
