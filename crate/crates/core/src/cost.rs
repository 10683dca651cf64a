use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::types::FeatureMask;

/// Acquisition pricing and discounting.
///
/// `per_feature`, when set, replaces the uniform `unit_cost` with one price per
/// acquirable feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub unit_cost: f64,
    pub discount: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_feature: Option<Vec<f64>>,
}

impl CostModel {
    pub fn new(unit_cost: f64, discount: f64) -> Result<Self> {
        let cm = Self {
            unit_cost,
            discount,
            per_feature: None,
        };
        cm.validate()?;
        Ok(cm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.unit_cost >= 0.0) || !self.unit_cost.is_finite() {
            return Err(CoreError::InvalidCostModel(format!(
                "unit_cost must be finite and >= 0, got {}",
                self.unit_cost
            )));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(CoreError::InvalidCostModel(format!(
                "discount must lie in [0, 1), got {}",
                self.discount
            )));
        }
        if let Some(costs) = &self.per_feature {
            if costs.iter().any(|c| !(*c >= 0.0)) {
                return Err(CoreError::InvalidCostModel(
                    "per-feature costs must be >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Price of acquiring `mask`: `c * |mask|` under uniform costs.
pub fn acquisition_cost(mask: &FeatureMask, cm: &CostModel) -> f64 {
    match &cm.per_feature {
        None => cm.unit_cost * mask.count() as f64,
        Some(costs) => mask
            .bits()
            .iter()
            .zip(costs)
            .filter(|(b, _)| **b)
            .map(|(_, c)| c)
            .sum(),
    }
}

/// Cost-adjusted discounted return `G_t = sum_k gamma^k (r_{t+k} - cost_{t+k})`
/// for every `t`.
pub fn discounted_return(rewards: &[f64], costs: &[f64], cm: &CostModel) -> Result<Vec<f64>> {
    if rewards.len() != costs.len() {
        return Err(CoreError::LengthMismatch {
            rewards: rewards.len(),
            costs: costs.len(),
        });
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = (rewards[t] - costs[t]) + cm.discount * acc;
        out[t] = acc;
    }
    Ok(out)
}
