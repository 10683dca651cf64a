//! Sepsis treatment simulator with acquirable vital measurements.
//!
//! Observation layout (8 entries): the four vitals as `level / (levels - 1)`,
//! then antibiotic, ventilation and vasopressor status, then the diabetes
//! flag. Only the four vitals are acquirable.

pub mod dynamics;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{acquisition_cost, CostModel};
use crate::env::Environment;
use crate::error::{CoreError, Result};
use crate::types::{EnvDescriptor, JointAction, MaskedObservation, Outcome, StepResult};

pub use dynamics::{treatments_from_bits, SepsisDynamics, Treatments, VITAL_NAMES};

pub const MAX_STEPS: usize = 30;
pub const N_CONTROLS: usize = 8;
pub const OBS_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SepsisState {
    /// Levels of heart rate, systolic BP, oxygen saturation and glucose.
    pub vitals: [usize; 4],
    pub treatments: Treatments,
    pub diabetic: bool,
    pub step_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SepsisTransition {
    pub state: SepsisState,
    pub reward: f64,
    pub terminal: bool,
    pub outcome: Outcome,
}

pub fn descriptor() -> EnvDescriptor {
    EnvDescriptor::new(
        "sepsis",
        vec![OBS_LEN],
        N_CONTROLS,
        MAX_STEPS,
        vec![vec![0], vec![1], vec![2], vec![3]],
    )
    .expect("sepsis descriptor is valid")
}

/// Treatments switched on by a control index: bit `i` toggles treatment `i`.
pub fn decode_control(control: usize) -> Treatments {
    treatments_from_bits(control)
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding slack: fall back to the last level with mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

impl SepsisDynamics {
    pub fn encode(&self, state: &SepsisState) -> Vec<f32> {
        let mut x = Vec::with_capacity(OBS_LEN);
        for (level, spec) in state.vitals.iter().zip(self.vitals()) {
            x.push(*level as f32 / (spec.levels - 1) as f32);
        }
        x.extend(state.treatments.iter().map(|&b| b as u8 as f32));
        x.push(state.diabetic as u8 as f32);
        x
    }

    pub fn initial_state<R: Rng>(&self, rng: &mut R) -> SepsisState {
        let init = self.initial();
        for _ in 0..100_000 {
            let diabetic = rng.random::<f64>() < init.diabetic_prob;
            let mut vitals = [0usize; 4];
            for (v, dist) in init.vitals.iter().enumerate() {
                vitals[v] = sample_categorical(dist, rng);
            }
            if init.reject_absorbing && (self.is_discharge(&vitals) || self.is_mortality(&vitals)) {
                continue;
            }
            return SepsisState {
                vitals,
                treatments: [false; 3],
                diabetic,
                step_count: 0,
            };
        }
        panic!("initial distribution never produced a non-absorbing state");
    }

    pub fn transition<R: Rng>(
        &self,
        state: &SepsisState,
        control: usize,
        rng: &mut R,
    ) -> Result<SepsisTransition> {
        if control >= N_CONTROLS {
            return Err(CoreError::InvalidControl {
                index: control,
                n: N_CONTROLS,
            });
        }
        let treatment = decode_control(control);
        let mut vitals = state.vitals;
        for (v, level) in vitals.iter_mut().enumerate() {
            let row = self.row(v, *level, state.treatments, treatment, state.diabetic);
            *level = sample_categorical(row, rng);
        }
        let next = SepsisState {
            vitals,
            treatments: treatment,
            diabetic: state.diabetic,
            step_count: state.step_count + 1,
        };
        let (reward, terminal, outcome) = if self.is_mortality(&vitals) {
            (-1.0, true, Outcome::Mortality)
        } else if self.is_discharge(&vitals) {
            (1.0, true, Outcome::Discharge)
        } else if next.step_count >= MAX_STEPS {
            (0.0, true, Outcome::Timeout)
        } else {
            (0.0, false, Outcome::None)
        };
        Ok(SepsisTransition {
            state: next,
            reward,
            terminal,
            outcome,
        })
    }
}

/// Stateful Sepsis environment sharing read-only dynamics.
#[derive(Debug, Clone)]
pub struct Sepsis {
    dynamics: Arc<SepsisDynamics>,
    desc: EnvDescriptor,
    cost: CostModel,
    state: Option<SepsisState>,
    rng: ChaCha8Rng,
    done: bool,
}

impl Sepsis {
    pub fn new(dynamics: Arc<SepsisDynamics>, cost: CostModel) -> Self {
        Self {
            dynamics,
            desc: descriptor(),
            cost,
            state: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            done: false,
        }
    }

    pub fn dynamics(&self) -> &SepsisDynamics {
        &self.dynamics
    }

    pub fn state(&self) -> Option<&SepsisState> {
        self.state.as_ref()
    }

    pub fn set_state(&mut self, state: SepsisState) {
        self.state = Some(state);
        self.done = false;
    }
}

impl Environment for Sepsis {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    fn set_cost_model(&mut self, cost: CostModel) {
        self.cost = cost;
    }

    fn version(&self) -> String {
        self.dynamics.version().to_string()
    }

    fn reset(&mut self, seed: u64) -> MaskedObservation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let state = self.dynamics.initial_state(&mut self.rng);
        self.state = Some(state);
        self.done = false;
        MaskedObservation::from_full(self.dynamics.encode(&state), self.desc.null_mask())
            .expect("encoding matches descriptor")
    }

    fn step(&mut self, action: &JointAction) -> Result<StepResult> {
        let state = self.state.ok_or(CoreError::NotReset)?;
        if self.done {
            return Err(CoreError::EpisodeOver);
        }
        let raw_mask = self.desc.expand_mask(&action.acquisition)?;
        let tr = self.dynamics.transition(&state, action.control, &mut self.rng)?;
        self.state = Some(tr.state);
        self.done = tr.terminal;
        let obs = MaskedObservation::from_full(self.dynamics.encode(&tr.state), raw_mask)?;
        let mut info = BTreeMap::new();
        info.insert("outcome".to_string(), tr.outcome.as_str().to_string());
        Ok(StepResult {
            obs,
            reward: tr.reward,
            cost: acquisition_cost(&action.acquisition, &self.cost),
            terminal: tr.terminal,
            outcome: tr.outcome,
            info,
        })
    }
}
