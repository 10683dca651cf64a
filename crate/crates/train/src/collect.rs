//! Trajectory collection with full observations.

use std::path::{Path, PathBuf};

use afa_core::seed::{derive_seed, rng_for};
use afa_core::{Dataset, DatasetHeader, Environment, FeatureMask, JointAction, MaskedObservation, TrajectoryRecord};
use afa_models::encoding::ImputerConfig;
use afa_models::nn::LstmState;
use afa_models::{ActMode, ActorCritic};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, InputPipeline};
use crate::config::{AcquisitionMode, ExperimentConfig};
use crate::envs::EnvFactory;
use crate::error::{Result, TrainError};

/// Fill value used when a policy reads raw observations of `kind`.
pub fn default_imputer(kind: afa_core::EnvKind) -> ImputerConfig {
    match kind {
        afa_core::EnvKind::BouncingBall => ImputerConfig::BOUNCING_BALL,
        afa_core::EnvKind::Sepsis => ImputerConfig::SEPSIS,
    }
}

/// Uniform control with independent per-feature acquisitions.
pub fn random_action<R: Rng>(n_controls: usize, n_features: usize, p: f64, rng: &mut R) -> JointAction {
    let control = rng.random_range(0..n_controls);
    let bits = (0..n_features).map(|_| rng.random::<f64>() < p).collect();
    JointAction::new(control, FeatureMask::new(bits))
}

/// Replaces the acquisition of `action` when the agent acquires at random.
pub fn apply_acquisition<R: Rng>(action: &mut JointAction, mode: AcquisitionMode, rng: &mut R) {
    if let AcquisitionMode::Random(p) = mode {
        let n = action.acquisition.len();
        action.acquisition = FeatureMask::new((0..n).map(|_| rng.random::<f64>() < p).collect());
    }
}

/// How collection chooses actions.
pub enum Behaviour {
    Random { p: f64 },
    Policy(Box<PolicyBehaviour>),
}

pub struct PolicyBehaviour {
    policy: ActorCritic,
    pipeline: InputPipeline,
    acquisition: AcquisitionMode,
    source: String,
}

impl Behaviour {
    pub fn from_agent(agent: &Agent, factory: &EnvFactory) -> Result<Self> {
        let policy = agent.frozen_policy()?;
        let pipeline = agent.pipeline(factory.descriptor(), default_imputer(factory.kind()), 1)?;
        let digest = agent.digest()?;
        Ok(Self::Policy(Box::new(PolicyBehaviour {
            policy,
            pipeline,
            acquisition: agent.acquisition,
            source: format!("policy:{}", &digest[..16]),
        })))
    }

    pub fn source(&self) -> String {
        match self {
            Self::Random { p } => format!("random:p={p}"),
            Self::Policy(b) => b.source.clone(),
        }
    }
}

/// Runs one episode and records full observations with the masks used.
pub fn run_episode(
    env: &mut dyn Environment,
    behaviour: &mut Behaviour,
    env_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryRecord> {
    let desc = env.descriptor().clone();
    let mut obs: MaskedObservation = env.reset(env_seed);
    let mut state: Option<LstmState> = None;
    if let Behaviour::Policy(b) = behaviour {
        b.pipeline.reset_rows(&[false])?;
        state = Some(b.policy.initial_state(1)?);
    }
    let mut rec = TrajectoryRecord {
        observations: Vec::new(),
        masks: Vec::new(),
        controls: Vec::new(),
        acquisitions: Vec::new(),
        rewards: Vec::new(),
        costs: Vec::new(),
        terminal: false,
        source: behaviour.source(),
    };
    loop {
        let action = match behaviour {
            Behaviour::Random { p } => random_action(desc.n_control_actions, desc.n_features, *p, rng),
            Behaviour::Policy(b) => {
                let input = b.pipeline.encode(std::slice::from_ref(&obs))?;
                let (mut d, next) =
                    b.policy
                        .act(&input, state.as_ref().expect("state set"), std::slice::from_mut(rng), ActMode::Sample)?;
                state = Some(next);
                let mut action = d.remove(0).action;
                apply_acquisition(&mut action, b.acquisition, rng);
                b.pipeline.push_actions(std::slice::from_ref(&action))?;
                action
            }
        };
        let full = obs
            .full()
            .ok_or_else(|| TrainError::Mismatch("environment returned no full observation".into()))?;
        rec.observations.push(full.to_vec());
        rec.masks.push(obs.mask().to_vec());
        let res = env.step(&action)?;
        rec.controls.push(action.control as u32);
        rec.acquisitions.push(action.acquisition);
        rec.rewards.push(res.reward as f32);
        rec.costs.push(res.cost as f32);
        if res.terminal {
            rec.terminal = true;
            return Ok(rec);
        }
        obs = res.obs;
    }
}

/// Generates `n` trajectories; the first `n_random` use the random policy.
pub fn collect_split(
    factory: &EnvFactory,
    collector: Option<&mut Behaviour>,
    n: usize,
    n_random: usize,
    random_p: f64,
    seed: u64,
    split: &str,
) -> Result<Vec<TrajectoryRecord>> {
    let mut env = factory.make();
    let mut random = Behaviour::Random { p: random_p };
    let mut collector = collector;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let env_seed = derive_seed(seed, &format!("collect-{split}-env"), i as u64);
        let mut rng = rng_for(seed, &format!("collect-{split}-policy"), i as u64);
        let behaviour = if i < n_random {
            &mut random
        } else {
            collector
                .as_deref_mut()
                .ok_or_else(|| TrainError::Config("collection needs a collector policy".into()))?
        };
        out.push(run_episode(env.as_mut(), behaviour, env_seed, &mut rng)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CollectSummary {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub train_random: usize,
    pub train_policy: usize,
}

/// Collects train and test splits into `out/train` and `out/test`.
pub fn collect_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<CollectSummary> {
    let factory = EnvFactory::from_config(cfg)?;
    let dc = &cfg.data;
    let random_only = dc.random_only || dc.random_fraction >= 1.0;
    let mut collector = match (&dc.collector_checkpoint, random_only) {
        (_, true) => None,
        (Some(path), false) => {
            let (agent, meta) = Agent::load(path)?;
            meta.require_env_version(factory.version())?;
            Some(Behaviour::from_agent(&agent, &factory)?)
        }
        (None, false) => {
            return Err(TrainError::Config(
                "data.collector_checkpoint is required unless data.random_only is set".into(),
            ))
        }
    };
    let n_random = |n: usize| {
        if random_only {
            n
        } else {
            (n as f64 * dc.random_fraction).round() as usize
        }
    };
    let header = DatasetHeader {
        env: factory.kind().as_str().to_string(),
        env_version: factory.version().to_string(),
        descriptor: factory.descriptor().clone(),
        unit_cost: cfg.env.unit_cost,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    let mut dirs = Vec::new();
    let mut train_random = 0;
    for (split, n) in [("train", dc.train_trajectories), ("test", dc.test_trajectories)] {
        let nr = n_random(n);
        if split == "train" {
            train_random = nr;
        }
        log::info!("collecting {n} {split} trajectories ({nr} random)");
        let records = collect_split(
            &factory,
            collector.as_mut(),
            n,
            nr,
            dc.random_acquisition_prob,
            cfg.seed,
            split,
        )?;
        let dir = out.join(split);
        Dataset {
            header: header.clone(),
            records,
        }
        .write(&dir)?;
        dirs.push(dir);
    }
    let test_dir = dirs.pop().expect("two splits");
    let train_dir = dirs.pop().expect("two splits");
    Ok(CollectSummary {
        train_dir,
        test_dir,
        train_random,
        train_policy: dc.train_trajectories - train_random,
    })
}
