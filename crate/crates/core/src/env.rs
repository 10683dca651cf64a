use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::Result;
use crate::types::{EnvDescriptor, JointAction, MaskedObservation, StepResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    BouncingBall,
    Sepsis,
}

impl EnvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvKind::BouncingBall => "bouncing_ball",
            EnvKind::Sepsis => "sepsis",
        }
    }
}

/// A resettable AFA-POMDP instance.
///
/// `step` filters the observation of the *next* state with the acquisition
/// carried by the action; `reset` returns the null observation.
pub trait Environment: Send {
    fn descriptor(&self) -> &EnvDescriptor;

    fn cost_model(&self) -> &CostModel;

    /// Replaces the acquisition price, e.g. when a cost schedule advances.
    fn set_cost_model(&mut self, cost: CostModel);

    /// Identifier of the dynamics the environment runs, recorded in every
    /// dataset and checkpoint.
    fn version(&self) -> String;

    fn reset(&mut self, seed: u64) -> MaskedObservation;

    fn step(&mut self, action: &JointAction) -> Result<StepResult>;
}
