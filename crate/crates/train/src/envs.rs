//! Environment construction from configuration.

use std::sync::Arc;

use afa_core::bouncing_ball::{BallConfig, BouncingBall};
use afa_core::sepsis::{Sepsis, SepsisDynamics};
use afa_core::{CostModel, EnvDescriptor, EnvKind, Environment};

use crate::config::ExperimentConfig;
use crate::error::Result;

/// Builds independent environment instances sharing read-only dynamics.
#[derive(Debug, Clone)]
pub struct EnvFactory {
    kind: EnvKind,
    ball: BallConfig,
    dynamics: Option<Arc<SepsisDynamics>>,
    cost: CostModel,
    desc: EnvDescriptor,
    version: String,
}

impl EnvFactory {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let cost = CostModel::new(cfg.env.unit_cost, cfg.env.discount)?;
        let ball = cfg.env.ball.clone().unwrap_or_default();
        let (dynamics, desc, version) = match cfg.env.kind {
            EnvKind::BouncingBall => (
                None,
                ball.descriptor(),
                afa_core::bouncing_ball::VERSION.to_string(),
            ),
            EnvKind::Sepsis => {
                let d = match &cfg.env.dynamics {
                    Some(path) => SepsisDynamics::load(path)?,
                    None => SepsisDynamics::shipped(),
                };
                let version = d.version().to_string();
                (Some(Arc::new(d)), afa_core::sepsis::descriptor(), version)
            }
        };
        Ok(Self {
            kind: cfg.env.kind,
            ball,
            dynamics,
            cost,
            desc,
            version,
        })
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    pub fn make(&self) -> Box<dyn Environment> {
        match self.kind {
            EnvKind::BouncingBall => Box::new(BouncingBall::new(self.ball.clone(), self.cost.clone())),
            EnvKind::Sepsis => Box::new(Sepsis::new(
                self.dynamics.clone().expect("sepsis factory holds dynamics"),
                self.cost.clone(),
            )),
        }
    }

    pub fn make_many(&self, n: usize) -> Vec<Box<dyn Environment>> {
        (0..n).map(|_| self.make()).collect()
    }
}
