//! Agents: the input pipeline from masked observations to policy inputs and
//! self-contained agent checkpoints.

use std::path::Path;

use afa_core::{EnvDescriptor, JointAction, MaskedObservation};
use afa_models::checkpoint;
use afa_models::encoding::{action_dim, encode_action, zero_impute, ImputerConfig};
use afa_models::{
    ActorCritic, Checkpoint, CheckpointKind, CheckpointMeta, FilterState, ParamStore, PolicyConfig,
    PolicyInput, Vae, VaeConfig, VaeKind,
};
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::AcquisitionMode;
use crate::error::{Result, TrainError};

/// Turns a batch of masked observations into policy inputs, one row per
/// environment, keeping the filter state of sequential models.
pub struct InputPipeline {
    vae: Option<Vae>,
    imputer: ImputerConfig,
    desc: EnvDescriptor,
    n: usize,
    filter: Option<FilterState>,
    prev_actions: Vec<f32>,
}

impl InputPipeline {
    /// Belief pipeline over a frozen VAE, or raw imputed observations when
    /// `vae` is `None`.
    pub fn new(vae: Option<Vae>, imputer: ImputerConfig, desc: &EnvDescriptor, n: usize) -> Result<Self> {
        let filter = match &vae {
            Some(v) if v.config().kind == VaeKind::SeqPoVae => Some(v.filter_reset(n)?),
            _ => None,
        };
        let imputer = vae.as_ref().map(|v| v.config().imputer).unwrap_or(imputer);
        Ok(Self {
            vae,
            imputer,
            desc: desc.clone(),
            n,
            filter,
            prev_actions: vec![0.0; n * action_dim(desc)],
        })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        match &self.vae {
            Some(v) => v.config().latent_dim,
            None => self.desc.obs_len(),
        }
    }

    /// Clears the history of every row where `keep` is false.
    pub fn reset_rows(&mut self, keep: &[bool]) -> Result<()> {
        let a = action_dim(&self.desc);
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                self.prev_actions[i * a..(i + 1) * a].fill(0.0);
            }
        }
        if let Some(f) = &self.filter {
            let k: Vec<f32> = keep.iter().map(|&k| k as u8 as f32).collect();
            let k = Tensor::from_vec(k, (self.n, 1), &Device::Cpu)?;
            self.filter = Some(FilterState {
                lstm: f.lstm.masked(&k)?,
                step: f.step,
            });
        }
        Ok(())
    }

    /// Policy inputs `(n, input_dim)` for the newest observation of every
    /// row; sequential models advance their filter.
    pub fn encode(&mut self, obs: &[MaskedObservation]) -> Result<Tensor> {
        if obs.len() != self.n {
            return Err(TrainError::Mismatch(format!("{} observations for {} rows", obs.len(), self.n)));
        }
        let d = self.desc.obs_len();
        let mut flat = Vec::with_capacity(self.n * d);
        for o in obs {
            flat.extend(zero_impute(o, self.imputer)?);
        }
        let imputed = Tensor::from_vec(flat, (self.n, d), &Device::Cpu)?;
        let Some(vae) = &self.vae else {
            return Ok(imputed);
        };
        match self.filter.take() {
            Some(prev) => {
                let a = Tensor::from_vec(self.prev_actions.clone(), (self.n, action_dim(&self.desc)), &Device::Cpu)?;
                let (next, dist) = vae.filter_step(&prev, &imputed, &a)?;
                self.filter = Some(next);
                Ok(dist.belief())
            }
            None => Ok(vae.encode_nonseq(&imputed)?.belief()),
        }
    }

    /// Records the actions just taken as the next step's previous actions.
    pub fn push_actions(&mut self, actions: &[JointAction]) -> Result<()> {
        let a = action_dim(&self.desc);
        for (i, act) in actions.iter().enumerate() {
            let enc = encode_action(&self.desc, act.control, &act.acquisition)?;
            self.prev_actions[i * a..(i + 1) * a].copy_from_slice(&enc);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AgentModel {
    policy: PolicyConfig,
    vae: Option<VaeConfig>,
    acquisition: AcquisitionMode,
}

/// Policy parameters plus the frozen VAE they read beliefs from.
#[derive(Debug, Clone)]
pub struct Agent {
    pub policy_cfg: PolicyConfig,
    pub policy_params: ParamStore,
    pub vae: Option<(VaeConfig, ParamStore)>,
    pub acquisition: AcquisitionMode,
}

impl Agent {
    /// Fresh policy initialised from `seed`.
    pub fn init(
        policy_cfg: PolicyConfig,
        vae: Option<(VaeConfig, ParamStore)>,
        acquisition: AcquisitionMode,
        seed: u64,
    ) -> Result<Self> {
        match (&vae, policy_cfg.input) {
            (Some((v, _)), PolicyInput::Belief) if v.latent_dim != policy_cfg.input_dim => {
                return Err(TrainError::Mismatch(format!(
                    "policy expects {} inputs, VAE latent has {}",
                    policy_cfg.input_dim, v.latent_dim
                )))
            }
            (None, PolicyInput::Belief) => return Err(TrainError::Mismatch("belief policy without a VAE".into())),
            (Some(_), PolicyInput::Observation) => {
                return Err(TrainError::Mismatch("observation policy given a VAE".into()))
            }
            _ => {}
        }
        let mut params = ParamStore::new(DType::F32);
        let mut init = params.initializer(seed);
        ActorCritic::new(&policy_cfg, &mut init)?;
        init.finish()?;
        Ok(Self {
            policy_cfg,
            policy_params: params,
            vae,
            acquisition,
        })
    }

    /// Policy whose tensors carry gradients to `policy_params`.
    pub fn trainable_policy(&mut self) -> Result<ActorCritic> {
        let mut init = self.policy_params.initializer(0);
        let policy = ActorCritic::new(&self.policy_cfg, &mut init)?;
        init.finish()?;
        Ok(policy)
    }

    /// Policy over detached views that follow optimizer updates.
    pub fn frozen_policy(&self) -> Result<ActorCritic> {
        Ok(ActorCritic::new(&self.policy_cfg, &mut self.policy_params.frozen())?)
    }

    pub fn pipeline(&self, desc: &EnvDescriptor, imputer: ImputerConfig, n: usize) -> Result<InputPipeline> {
        let vae = match &self.vae {
            Some((cfg, params)) => Some(Vae::new(cfg, &mut params.frozen())?),
            None => None,
        };
        InputPipeline::new(vae, imputer, desc, n)
    }

    fn combined(&self) -> Result<ParamStore> {
        let mut all = self.policy_params.prefixed("policy");
        if let Some((_, v)) = &self.vae {
            all = all.merged(&v.prefixed("vae"))?;
        }
        Ok(all)
    }

    /// Writes a checkpoint holding the policy and its VAE.
    pub fn save(&self, path: &Path, mut meta: CheckpointMeta) -> Result<CheckpointMeta> {
        meta.kind = CheckpointKind::Policy;
        meta.model = serde_json::to_value(AgentModel {
            policy: self.policy_cfg.clone(),
            vae: self.vae.as_ref().map(|(c, _)| c.clone()),
            acquisition: self.acquisition,
        })
        .expect("agent model serializes");
        Ok(checkpoint::save(path, &self.combined()?, meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let Checkpoint { meta, params } = checkpoint::load(path)?;
        meta.require_kind(CheckpointKind::Policy)?;
        let model: AgentModel = serde_json::from_value(meta.model.clone()).map_err(|e| TrainError::Schema {
            path: path.to_path_buf(),
            reason: format!("agent model: {e}"),
        })?;
        let vae = model.vae.map(|cfg| (cfg, params.strip_prefix("vae")));
        let agent = Self {
            policy_cfg: model.policy,
            policy_params: params.strip_prefix("policy"),
            vae,
            acquisition: model.acquisition,
        };
        agent.frozen_policy()?;
        if let Some((cfg, p)) = &agent.vae {
            Vae::new(cfg, &mut p.frozen())?;
        }
        Ok((agent, meta))
    }

    /// Content digest over all parameters.
    pub fn digest(&self) -> Result<String> {
        Ok(self.combined()?.digest()?)
    }
}
