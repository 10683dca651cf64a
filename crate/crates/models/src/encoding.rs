//! Zero-imputation and action encoding shared by every model input path.

use afa_core::{EnvDescriptor, FeatureMask, MaskedObservation};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Value written into unobserved entries before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputerConfig {
    pub fill_value: f32,
}

impl ImputerConfig {
    pub const BOUNCING_BALL: Self = Self { fill_value: 0.5 };
    pub const SEPSIS: Self = Self { fill_value: -10.0 };
}

/// `values` where `mask` is true, the fill value elsewhere.
pub fn impute_slice(values: &[f32], mask: &[bool], cfg: ImputerConfig) -> Result<Vec<f32>> {
    if values.len() != mask.len() {
        return Err(ModelError::Shape(format!(
            "observation has {} entries, mask has {}",
            values.len(),
            mask.len()
        )));
    }
    Ok(values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { cfg.fill_value })
        .collect())
}

pub fn zero_impute(obs: &MaskedObservation, cfg: ImputerConfig) -> Result<Vec<f32>> {
    impute_slice(obs.observed(), obs.mask(), cfg)
}

/// Width of the encoded previous action: one-hot control then acquisition bits.
pub fn action_dim(desc: &EnvDescriptor) -> usize {
    desc.n_control_actions + desc.n_features
}

pub fn encode_action(desc: &EnvDescriptor, control: usize, acquisition: &FeatureMask) -> Result<Vec<f32>> {
    desc.check_control(control)?;
    if acquisition.len() != desc.n_features {
        return Err(ModelError::Shape(format!(
            "acquisition has {} bits, descriptor has {} features",
            acquisition.len(),
            desc.n_features
        )));
    }
    let mut v = vec![0.0; action_dim(desc)];
    v[control] = 1.0;
    for (i, &b) in acquisition.bits().iter().enumerate() {
        v[desc.n_control_actions + i] = b as u8 as f32;
    }
    Ok(v)
}
