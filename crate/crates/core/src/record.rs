use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::types::{EnvDescriptor, FeatureMask};

/// One episode. Entry `t` pairs the observation the agent saw at step `t`
/// (full values plus the mask it was seen through) with the joint action it
/// then took and the reward and cost that followed.
///
/// `masks[0]` is the null mask; `masks[t]` is the expansion of
/// `acquisitions[t - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub observations: Vec<Vec<f32>>,
    pub masks: Vec<Vec<bool>>,
    pub controls: Vec<u32>,
    pub acquisitions: Vec<FeatureMask>,
    pub rewards: Vec<f32>,
    pub costs: Vec<f32>,
    pub terminal: bool,
    /// Identity of the policy that generated the episode.
    pub source: String,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn validate(&self, desc: &EnvDescriptor, unit_cost: f64, index: usize) -> Result<()> {
        let fail = |reason: String| Err(CoreError::InvalidRecord { index, reason });
        let t = self.len();
        if t == 0 {
            return fail("empty trajectory".into());
        }
        if t > desc.max_steps {
            return fail(format!("length {t} exceeds max_steps {}", desc.max_steps));
        }
        let lens = [
            ("observations", self.observations.len()),
            ("masks", self.masks.len()),
            ("acquisitions", self.acquisitions.len()),
            ("rewards", self.rewards.len()),
            ("costs", self.costs.len()),
        ];
        for (name, len) in lens {
            if len != t {
                return fail(format!("{name} has length {len}, controls has {t}"));
            }
        }
        let d = desc.obs_len();
        for step in 0..t {
            if self.observations[step].len() != d || self.masks[step].len() != d {
                return fail(format!("step {step}: observation or mask width differs from {d}"));
            }
            if self.acquisitions[step].len() != desc.n_features {
                return fail(format!("step {step}: acquisition width differs from {}", desc.n_features));
            }
            if self.controls[step] as usize >= desc.n_control_actions {
                return fail(format!("step {step}: control {} out of range", self.controls[step]));
            }
            let expected_mask = if step == 0 {
                desc.null_mask()
            } else {
                desc.expand_mask(&self.acquisitions[step - 1])?
            };
            if self.masks[step] != expected_mask {
                return fail(format!("step {step}: mask disagrees with the previous acquisition"));
            }
            let expected_cost = (unit_cost * self.acquisitions[step].count() as f64) as f32;
            if self.costs[step] != expected_cost {
                return fail(format!(
                    "step {step}: cost {} but acquisition implies {expected_cost}",
                    self.costs[step]
                ));
            }
        }
        Ok(())
    }
}
