//! Value types shared by environments, models and the training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Static description of an AFA-POMDP instance.
///
/// `feature_groups[i]` lists the raw observation indices revealed by acquiring
/// feature `i`. Raw indices outside every group are always observed for free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub name: String,
    pub n_features: usize,
    pub obs_shape: Vec<usize>,
    pub n_control_actions: usize,
    pub max_steps: usize,
    pub feature_groups: Vec<Vec<usize>>,
}

impl EnvDescriptor {
    pub fn new(
        name: impl Into<String>,
        obs_shape: Vec<usize>,
        n_control_actions: usize,
        max_steps: usize,
        feature_groups: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let desc = Self {
            name: name.into(),
            n_features: feature_groups.len(),
            obs_shape,
            n_control_actions,
            max_steps,
            feature_groups,
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidDescriptor(msg));
        if self.n_features == 0 || self.n_features != self.feature_groups.len() {
            return bad(format!(
                "n_features = {} with {} groups",
                self.n_features,
                self.feature_groups.len()
            ));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if self.n_control_actions == 0 {
            return bad("n_control_actions must be at least 1".into());
        }
        let len = self.obs_len();
        let mut seen = vec![false; len];
        for (g, group) in self.feature_groups.iter().enumerate() {
            for &i in group {
                if i >= len {
                    return bad(format!("group {g} references raw index {i} >= {len}"));
                }
                if seen[i] {
                    return bad(format!("raw index {i} belongs to more than one group"));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// Number of raw scalar entries in one observation.
    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    /// Raw indices that belong to no acquirable group.
    pub fn always_observed(&self) -> Vec<usize> {
        let mut grouped = vec![false; self.obs_len()];
        for group in &self.feature_groups {
            for &i in group {
                grouped[i] = true;
            }
        }
        (0..grouped.len()).filter(|&i| !grouped[i]).collect()
    }

    pub fn check_control(&self, control: usize) -> Result<()> {
        if control >= self.n_control_actions {
            return Err(CoreError::InvalidControl {
                index: control,
                n: self.n_control_actions,
            });
        }
        Ok(())
    }

    /// Raw-index mask revealed by `mask`: the union of the selected groups
    /// plus every always-observed index.
    pub fn expand_mask(&self, mask: &FeatureMask) -> Result<Vec<bool>> {
        if mask.len() != self.n_features {
            return Err(CoreError::MaskLength {
                expected: self.n_features,
                got: mask.len(),
            });
        }
        let mut raw = vec![true; self.obs_len()];
        for (group, &selected) in self.feature_groups.iter().zip(mask.bits()) {
            if !selected {
                for &i in group {
                    raw[i] = false;
                }
            }
        }
        Ok(raw)
    }

    /// Raw mask of the null observation (nothing acquired).
    pub fn null_mask(&self) -> Vec<bool> {
        self.expand_mask(&FeatureMask::none(self.n_features))
            .expect("null mask has descriptor length")
    }
}

/// Acquisition subset `a^f`, one bit per acquirable feature.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask(Vec<bool>);

impl FeatureMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

impl From<Vec<bool>> for FeatureMask {
    fn from(bits: Vec<bool>) -> Self {
        Self(bits)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointAction {
    pub control: usize,
    pub acquisition: FeatureMask,
}

impl JointAction {
    pub fn new(control: usize, acquisition: FeatureMask) -> Self {
        Self {
            control,
            acquisition,
        }
    }
}

/// Observation as seen through an acquisition mask.
///
/// `observed` carries the true value where `mask` is set and `0.0` elsewhere;
/// consumers must go through the mask (e.g. zero-imputation) before reading it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedObservation {
    full: Option<Vec<f32>>,
    observed: Vec<f32>,
    mask: Vec<bool>,
}

impl MaskedObservation {
    /// Masks `full`, keeping the full vector for privileged consumers.
    pub fn from_full(full: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        let mut obs = Self::partial(&full, mask)?;
        obs.full = Some(full);
        Ok(obs)
    }

    /// Masks `full` and discards the unobserved part.
    pub fn partial(full: &[f32], mask: Vec<bool>) -> Result<Self> {
        if full.len() != mask.len() {
            return Err(CoreError::ObservationLength {
                expected: mask.len(),
                got: full.len(),
            });
        }
        let observed = full
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        Ok(Self {
            full: None,
            observed,
            mask,
        })
    }

    pub fn full(&self) -> Option<&[f32]> {
        self.full.as_deref()
    }

    pub fn observed(&self) -> &[f32] {
        &self.observed
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, i: usize) -> Option<f32> {
        self.mask[i].then(|| self.observed[i])
    }

    pub fn without_full(mut self) -> Self {
        self.full = None;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    None,
    Success,
    Discharge,
    Mortality,
    Timeout,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::None => "none",
            Outcome::Success => "success",
            Outcome::Discharge => "discharge",
            Outcome::Mortality => "mortality",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    /// Next observation, filtered by the acquisition submitted with this step.
    pub obs: MaskedObservation,
    pub reward: f64,
    pub cost: f64,
    pub terminal: bool,
    pub outcome: Outcome,
    pub info: BTreeMap<String, String>,
}
