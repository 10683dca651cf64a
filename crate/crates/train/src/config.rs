//! Experiment configuration: strict TOML schema, dotted overrides and a
//! canonical content hash.

use std::path::{Path, PathBuf};

use afa_core::bouncing_ball::BallConfig;
use afa_core::EnvKind;
use afa_models::{PolicyConfig, PolicyInput, SupervisionMode, VaeConfig, VaeKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Artifact directory, resolved against the output root when relative.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write `wall_seconds = 0` so repeated runs give identical metrics files.
    #[serde(default)]
    pub deterministic: bool,
    pub env: EnvConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub vae: VaeTrainConfig,
    #[serde(default)]
    pub policy: PolicyTrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    #[serde(default = "default_unit_cost")]
    pub unit_cost: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    /// Sepsis dynamics file; the shipped tables are used when absent.
    #[serde(default)]
    pub dynamics: Option<PathBuf>,
    #[serde(default)]
    pub ball: Option<BallConfig>,
}

fn default_unit_cost() -> f64 {
    0.01
}

fn default_discount() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    /// Share of each split generated by the random policy.
    pub random_fraction: f64,
    /// Per-feature acquisition probability of the random policy.
    pub random_acquisition_prob: f64,
    /// Collect everything with the random policy when no collector
    /// checkpoint is available.
    pub random_only: bool,
    pub collector_checkpoint: Option<PathBuf>,
    /// Existing dataset root holding `train/` and `test/`.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_trajectories: 2000,
            test_trajectories: 2000,
            random_fraction: 0.5,
            random_acquisition_prob: 0.5,
            random_only: false,
            collector_checkpoint: None,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub model: VaeKind,
    pub supervision: SupervisionMode,
    /// Defaults to the per-environment, per-model rate.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_grad_norm: Option<f64>,
    /// Full architecture override; the reference preset when absent.
    pub arch: Option<VaeConfig>,
    /// Pre-trained VAE consumed by `train-policy` and `eval`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            model: VaeKind::SeqPoVae,
            supervision: SupervisionMode::Full,
            learning_rate: None,
            batch_size: 4,
            epochs: 20,
            max_grad_norm: Some(100.0),
            arch: None,
            checkpoint: None,
        }
    }
}

/// Where acquisition decisions come from during policy training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionMode {
    Learned,
    /// Each feature acquired independently with this probability.
    Random(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyTrainConfig {
    pub input: PolicyInput,
    pub learning_rate: f64,
    pub workers: usize,
    pub rollout_length: usize,
    pub total_env_steps: u64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: Option<f64>,
    /// Overrides the preset recurrent size.
    pub lstm_hidden: Option<usize>,
    /// Full architecture override.
    pub arch: Option<PolicyConfig>,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub acquisition: AcquisitionMode,
    /// `(env_steps, unit_cost)` pairs; from each threshold on, the unit cost
    /// switches to the paired value.
    pub cost_schedule: Vec<(u64, f64)>,
    /// Write every training transition to `transitions.csv`.
    pub save_transitions: bool,
    /// Trained policy consumed by `eval` and `collect`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            input: PolicyInput::Belief,
            learning_rate: 1e-4,
            workers: 16,
            rollout_length: 20,
            total_env_steps: 1_000_000,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: Some(40.0),
            lstm_hidden: None,
            arch: None,
            eval_interval: 50_000,
            eval_episodes: 100,
            acquisition: AcquisitionMode::Learned,
            cost_schedule: Vec::new(),
            save_transitions: false,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub random_probs: Vec<f64>,
    pub sweep_costs: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    /// Concurrent sweep cells.
    pub jobs: usize,
    /// Trailing share of evaluation points averaged as "converged".
    pub convergence_fraction: f64,
    /// Metrics files read by `plot`.
    pub plot_inputs: Vec<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            random_probs: vec![0.25, 0.5, 0.75, 1.0],
            sweep_costs: vec![0.0, 0.01, 0.025],
            sweep_seeds: vec![0, 1, 2],
            jobs: 1,
            convergence_fraction: 0.2,
            plot_inputs: Vec::new(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> TrainError {
    TrainError::Config(msg.into())
}

impl ExperimentConfig {
    /// Minimal configuration for `kind` with every other setting at its default.
    pub fn new(kind: EnvKind) -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            deterministic: false,
            env: EnvConfig {
                kind,
                unit_cost: default_unit_cost(),
                discount: default_discount(),
                dynamics: None,
                ball: None,
            },
            data: DataConfig::default(),
            vae: VaeTrainConfig::default(),
            policy: PolicyTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides with dotted keys, then
    /// deserializes strictly and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_json()).expect("configuration serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        let positive = |name: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive")))
            }
        };
        if !(self.env.unit_cost >= 0.0 && self.env.unit_cost.is_finite()) {
            return Err(invalid("env.unit_cost must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.env.discount) {
            return Err(invalid("env.discount must lie in [0, 1)"));
        }
        if self.env.ball.is_some() && self.env.kind != EnvKind::BouncingBall {
            return Err(invalid("env.ball only applies to bouncing_ball"));
        }
        if self.env.dynamics.is_some() && self.env.kind != EnvKind::Sepsis {
            return Err(invalid("env.dynamics only applies to sepsis"));
        }
        unit("data.random_fraction", self.data.random_fraction)?;
        unit("data.random_acquisition_prob", self.data.random_acquisition_prob)?;
        positive("data.train_trajectories", self.data.train_trajectories)?;
        positive("data.test_trajectories", self.data.test_trajectories)?;
        positive("vae.batch_size", self.vae.batch_size)?;
        positive("vae.epochs", self.vae.epochs)?;
        self.vae.supervision.validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(lr) = self.vae.learning_rate {
            if !(lr > 0.0) {
                return Err(invalid("vae.learning_rate must be positive"));
            }
        }
        if !(self.policy.learning_rate > 0.0) {
            return Err(invalid("policy.learning_rate must be positive"));
        }
        positive("policy.workers", self.policy.workers)?;
        positive("policy.rollout_length", self.policy.rollout_length)?;
        positive("policy.eval_episodes", self.policy.eval_episodes)?;
        if self.policy.eval_interval == 0 {
            return Err(invalid("policy.eval_interval must be positive"));
        }
        if self.policy.entropy_coef < 0.0 || self.policy.value_coef < 0.0 {
            return Err(invalid("policy coefficients must be non-negative"));
        }
        if let AcquisitionMode::Random(p) = self.policy.acquisition {
            unit("policy.acquisition.random", p)?;
        }
        let mut last = None;
        for &(step, cost) in &self.policy.cost_schedule {
            if !(cost >= 0.0) {
                return Err(invalid("policy.cost_schedule costs must be non-negative"));
            }
            if last.is_some_and(|l| step <= l) {
                return Err(invalid("policy.cost_schedule thresholds must increase"));
            }
            last = Some(step);
        }
        for &p in &self.eval.random_probs {
            unit("eval.random_probs", p)?;
        }
        if self.eval.sweep_costs.iter().any(|c| !(*c >= 0.0)) {
            return Err(invalid("eval.sweep_costs must be non-negative"));
        }
        positive("eval.jobs", self.eval.jobs)?;
        if !(self.eval.convergence_fraction > 0.0 && self.eval.convergence_fraction <= 1.0) {
            return Err(invalid("eval.convergence_fraction must lie in (0, 1]"));
        }
        let files = [
            ("env.dynamics", &self.env.dynamics),
            ("data.collector_checkpoint", &self.data.collector_checkpoint),
            ("vae.checkpoint", &self.vae.checkpoint),
            ("policy.checkpoint", &self.policy.checkpoint),
        ];
        for (name, path) in files {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(invalid(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Learning rate for VAE training, falling back to the reference values.
    pub fn vae_learning_rate(&self) -> f64 {
        self.vae.learning_rate.unwrap_or(match (self.env.kind, self.vae.model) {
            (EnvKind::BouncingBall, VaeKind::NonseqZi) => 1e-4,
            (EnvKind::BouncingBall, VaeKind::SeqPoVae) => 5e-4,
            (EnvKind::Sepsis, VaeKind::NonseqZi) => 1e-4,
            (EnvKind::Sepsis, VaeKind::SeqPoVae) => 1e-3,
        })
    }

    /// Unit cost in force after `env_steps` steps.
    pub fn cost_at(&self, env_steps: u64) -> f64 {
        let mut cost = self.env.unit_cost;
        for &(step, c) in &self.policy.cost_schedule {
            if env_steps >= step {
                cost = c;
            }
        }
        cost
    }
}

/// Sets `a.b.c = value` in `doc`. The value is read as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
