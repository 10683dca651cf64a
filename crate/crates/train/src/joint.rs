//! Synchronous actor-critic training of the acquisition and task policies
//! on top of a frozen representation.

use std::path::Path;
use std::time::Instant;

use afa_core::seed::{derive_seed, rng_for};
use afa_core::{CostModel, EnvKind, Environment, JointAction, MaskedObservation};
use afa_models::optim::Adam;
use afa_models::policy::{a3c_loss_with_returns, n_step_returns};
use afa_models::{A3cHyper, ActMode, CheckpointKind, CheckpointMeta, ParamStore, PolicyConfig, PolicyInput, VaeConfig};
use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::Agent;
use crate::collect::{apply_acquisition, default_imputer};
use crate::config::{AcquisitionMode, ExperimentConfig};
use crate::envs::EnvFactory;
use crate::error::{Result, TrainError};
use crate::metrics::{CsvSink, EpisodeSummary, EvalSummary, MetricsRow};

/// Policy architecture from the configuration, checked against the
/// environment and the representation width.
pub fn policy_config(cfg: &ExperimentConfig, factory: &EnvFactory, vae: Option<&VaeConfig>) -> Result<PolicyConfig> {
    let desc = factory.descriptor();
    let input = cfg.policy.input;
    let latent = vae.map(|v| v.latent_dim).unwrap_or(0);
    let mut pc = cfg
        .policy
        .arch
        .clone()
        .unwrap_or_else(|| PolicyConfig::preset(cfg.env.kind, input, desc, latent));
    if let Some(h) = cfg.policy.lstm_hidden {
        pc.lstm_hidden = h;
    }
    pc.validate()?;
    if pc.input != input {
        return Err(TrainError::Config("policy.arch.input disagrees with policy.input".into()));
    }
    if pc.n_controls != desc.n_control_actions || pc.n_features != desc.n_features {
        return Err(TrainError::Mismatch(format!(
            "policy heads {}x{} do not match the environment's {}x{}",
            pc.n_controls, pc.n_features, desc.n_control_actions, desc.n_features
        )));
    }
    if let Some(v) = vae {
        if v.obs_len != desc.obs_len() {
            return Err(TrainError::Mismatch(format!(
                "VAE reads {} entries, environment emits {}",
                v.obs_len,
                desc.obs_len()
            )));
        }
    }
    Ok(pc)
}

/// Greedy evaluation over `episodes` fixed seeds at unit cost `unit_cost`.
pub fn evaluate_agent(agent: &Agent, factory: &EnvFactory, unit_cost: f64, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let desc = factory.descriptor().clone();
    let policy = agent.frozen_policy()?;
    let mut pipeline = agent.pipeline(&desc, default_imputer(factory.kind()), episodes)?;
    let cost = CostModel::new(unit_cost, factory.cost_model().discount)?;
    let mut envs = factory.make_many(episodes);
    let mut obs = Vec::with_capacity(episodes);
    for (i, env) in envs.iter_mut().enumerate() {
        env.set_cost_model(cost.clone());
        obs.push(env.reset(derive_seed(seed, "eval", i as u64)));
    }
    let mut acq_rngs: Vec<ChaCha8Rng> = (0..episodes).map(|i| rng_for(seed, "eval-acquisition", i as u64)).collect();
    let mut dummy: Vec<ChaCha8Rng> = (0..episodes).map(|i| rng_for(seed, "eval-policy", i as u64)).collect();
    let mut state = policy.initial_state(episodes)?;
    let mut done = vec![false; episodes];
    let mut out: Vec<EpisodeSummary> = (0..episodes)
        .map(|_| EpisodeSummary {
            task_reward: 0.0,
            cost: 0.0,
            acquisitions: 0,
            length: 0,
            outcome: afa_core::Outcome::None,
        })
        .collect();
    while done.iter().any(|d| !d) {
        let input = pipeline.encode(&obs)?;
        let (decisions, next) = policy.act(&input, &state, &mut dummy, ActMode::Greedy)?;
        state = next;
        let mut actions = Vec::with_capacity(episodes);
        for (i, d) in decisions.into_iter().enumerate() {
            let mut action = d.action;
            if !done[i] {
                apply_acquisition(&mut action, agent.acquisition, &mut acq_rngs[i]);
                let res = envs[i].step(&action)?;
                let e = &mut out[i];
                e.task_reward += res.reward;
                e.cost += res.cost;
                e.acquisitions += action.acquisition.count();
                e.length += 1;
                if res.terminal {
                    e.outcome = res.outcome;
                    done[i] = true;
                }
                obs[i] = res.obs;
            }
            actions.push(action);
        }
        pipeline.push_actions(&actions)?;
    }
    Ok(EvalSummary {
        episodes: out,
        clinical: factory.kind() == EnvKind::Sepsis,
    })
}

/// One training transition as listed by the training loop: belief, both
/// action parts, reward, cost and termination.
#[derive(Debug, Clone, Serialize)]
pub struct TransitionRow {
    pub env_steps: u64,
    pub worker: usize,
    pub episode: u64,
    pub step: usize,
    /// Space-separated policy input.
    pub belief: String,
    /// Acquisition bits, one character per feature.
    pub acquisition: String,
    pub control: usize,
    pub reward: f64,
    pub cost: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct JointResult {
    pub agent: Agent,
    pub metrics: Vec<MetricsRow>,
    pub env_steps: u64,
    pub updates: u64,
}

struct Worker {
    env: Box<dyn Environment>,
    episode: u64,
    step: usize,
}

fn episode_seed(seed: u64, worker: usize, episode: u64) -> u64 {
    derive_seed(derive_seed(seed, "train-env", worker as u64), "episode", episode)
}

/// Runs the joint training loop. With `out_dir`, metrics are streamed to
/// `metrics.csv` and, when enabled, transitions to `transitions.csv`.
pub fn train_joint(cfg: &ExperimentConfig, vae: Option<(VaeConfig, ParamStore)>, out_dir: Option<&Path>) -> Result<JointResult> {
    let factory = EnvFactory::from_config(cfg)?;
    let vae = match cfg.policy.input {
        PolicyInput::Belief => Some(vae.ok_or_else(|| TrainError::Config("belief policies need vae.checkpoint".into()))?),
        PolicyInput::Observation => None,
    };
    let pc = policy_config(cfg, &factory, vae.as_ref().map(|(c, _)| c))?;
    let mut agent = Agent::init(pc, vae, cfg.policy.acquisition, derive_seed(cfg.seed, "policy-init", 0))?;
    let trainable = agent.trainable_policy()?;
    let frozen = agent.frozen_policy()?;
    let mut opt = Adam::new(&agent.policy_params, cfg.policy.learning_rate, cfg.policy.max_grad_norm)?;
    let hyper = A3cHyper {
        value_coef: cfg.policy.value_coef,
        entropy_coef: cfg.policy.entropy_coef,
        train_acquisition: cfg.policy.acquisition == AcquisitionMode::Learned,
    };
    let gamma = cfg.env.discount;
    let w = cfg.policy.workers;
    let t_len = cfg.policy.rollout_length;
    let desc = factory.descriptor().clone();

    let mut metrics_sink = match out_dir {
        Some(d) => Some(CsvSink::<MetricsRow>::create(&d.join("metrics.csv"))?),
        None => None,
    };
    let mut trans_sink = match (out_dir, cfg.policy.save_transitions) {
        (Some(d), true) => Some(CsvSink::<TransitionRow>::create(&d.join("transitions.csv"))?),
        _ => None,
    };

    let mut unit_cost = cfg.cost_at(0);
    let mut rngs: Vec<ChaCha8Rng> = (0..w).map(|i| rng_for(cfg.seed, "train-worker", i as u64)).collect();
    let mut workers: Vec<Worker> = (0..w)
        .map(|_| Worker {
            env: factory.make(),
            episode: 0,
            step: 0,
        })
        .collect();
    let mut obs: Vec<MaskedObservation> = Vec::with_capacity(w);
    for (i, wk) in workers.iter_mut().enumerate() {
        wk.env.set_cost_model(CostModel::new(unit_cost, gamma)?);
        obs.push(wk.env.reset(episode_seed(cfg.seed, i, 0)));
    }
    let mut pipeline = agent.pipeline(&desc, default_imputer(factory.kind()), w)?;
    let mut state = frozen.initial_state(w)?;
    let mut input = pipeline.encode(&obs)?;

    let started = Instant::now();
    let wall = |s: &Instant| if cfg.deterministic { 0.0 } else { s.elapsed().as_secs_f64() };
    let eval_seed = derive_seed(cfg.seed, "evaluation", 0);
    let mut metrics = Vec::new();
    let mut record = |agent: &Agent, env_steps: u64, updates: u64, unit_cost: f64, paid: f64, metrics: &mut Vec<MetricsRow>| -> Result<()> {
        let e = evaluate_agent(agent, &factory, unit_cost, cfg.policy.eval_episodes, eval_seed)?;
        let row = MetricsRow::from_eval(env_steps, updates, unit_cost, paid, wall(&started), &e);
        log::info!(
            "env_steps {env_steps}: task reward {:.3}, cost-adjusted {:.3}, acquisitions {:.2}",
            row.mean_task_reward,
            row.mean_cost_adjusted_return,
            row.mean_episodic_acquisitions
        );
        if let Some(s) = metrics_sink.as_mut() {
            s.push(&row)?;
        }
        metrics.push(row);
        Ok(())
    };
    record(&agent, 0, 0, unit_cost, 0.0, &mut metrics)?;

    let mut env_steps = 0u64;
    let mut updates = 0u64;
    let mut paid = 0f64;
    let mut next_eval = cfg.policy.eval_interval;
    let mut last_logged = 0u64;
    let dev = Device::Cpu;
    while env_steps < cfg.policy.total_env_steps {
        let start = state.detach();
        let mut inputs = Vec::with_capacity(t_len);
        let mut keeps = vec![1f32; t_len * w];
        let mut actions: Vec<JointAction> = Vec::with_capacity(t_len * w);
        let mut rewards = vec![0f64; t_len * w];
        let mut costs = vec![0f64; t_len * w];
        let mut dones = vec![false; t_len * w];
        for s in 0..t_len {
            let (decisions, next) = frozen.act(&input, &state, &mut rngs, ActMode::Sample)?;
            let mut keep = vec![true; w];
            let mut step_actions = Vec::with_capacity(w);
            for (i, d) in decisions.into_iter().enumerate() {
                let wk = &mut workers[i];
                let mut action = d.action;
                apply_acquisition(&mut action, cfg.policy.acquisition, &mut rngs[i]);
                let res = wk.env.step(&action)?;
                let k = s * w + i;
                rewards[k] = res.reward;
                costs[k] = res.cost;
                paid += res.cost;
                dones[k] = res.terminal;
                if let Some(sink) = trans_sink.as_mut() {
                    let belief: Vec<f32> = input.get(i)?.to_vec1()?;
                    sink.push(&TransitionRow {
                        env_steps: env_steps + i as u64,
                        worker: i,
                        episode: wk.episode,
                        step: wk.step,
                        belief: belief.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
                        acquisition: action.acquisition.bits().iter().map(|&b| if b { '1' } else { '0' }).collect(),
                        control: action.control,
                        reward: res.reward,
                        cost: res.cost,
                        terminal: res.terminal,
                    })?;
                }
                wk.step += 1;
                if res.terminal {
                    wk.episode += 1;
                    wk.step = 0;
                    keep[i] = false;
                    obs[i] = wk.env.reset(episode_seed(cfg.seed, i, wk.episode));
                } else {
                    obs[i] = res.obs;
                }
                if s + 1 < t_len {
                    keeps[(s + 1) * w + i] = keep[i] as u8 as f32;
                }
                step_actions.push(action.clone());
                actions.push(action);
            }
            env_steps += w as u64;
            pipeline.push_actions(&step_actions)?;
            pipeline.reset_rows(&keep)?;
            let k = Tensor::from_vec(keep.iter().map(|&b| b as u8 as f32).collect::<Vec<_>>(), (w, 1), &dev)?;
            state = next.masked(&k)?.detach();
            inputs.push(input);
            input = pipeline.encode(&obs)?;
            let scheduled = cfg.cost_at(env_steps);
            if scheduled != unit_cost {
                unit_cost = scheduled;
                for wk in workers.iter_mut() {
                    wk.env.set_cost_model(CostModel::new(unit_cost, gamma)?);
                }
                log::info!("unit cost now {unit_cost} at {env_steps} env steps");
            }
        }
        let boot: Vec<f32> = frozen.step(&input, &state)?.value.to_vec1()?;
        let mut returns = vec![0f64; t_len * w];
        for i in 0..w {
            let col = |v: &[f64]| (0..t_len).map(|s| v[s * w + i]).collect::<Vec<_>>();
            let d: Vec<bool> = (0..t_len).map(|s| dones[s * w + i]).collect();
            let g = n_step_returns(&col(&rewards), &col(&costs), &d, boot[i] as f64, gamma);
            for s in 0..t_len {
                returns[s * w + i] = g[s];
            }
        }
        let xs = Tensor::stack(&inputs, 0)?;
        let keep_t = Tensor::from_vec(keeps, (t_len, w), &dev)?;
        let (cl, al, v, _) = trainable.unroll(&xs, &start, &keep_t)?;
        let loss = a3c_loss_with_returns(&cl, &al, &v, &actions, &returns, &hyper)?;
        let total = (loss.total / w as f64)?;
        let value: f32 = total.to_scalar()?;
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                epoch: 0,
                batch: updates as usize,
                detail: format!("policy loss {value} after {env_steps} env steps"),
            });
        }
        opt.backward_step(&total)?;
        updates += 1;
        if env_steps >= next_eval || env_steps >= cfg.policy.total_env_steps {
            record(&agent, env_steps, updates, unit_cost, paid, &mut metrics)?;
            while next_eval <= env_steps {
                next_eval += cfg.policy.eval_interval;
            }
        }
        if env_steps - last_logged >= 10_000 {
            log::debug!("{env_steps} env steps, {updates} updates");
            last_logged = env_steps;
        }
    }
    Ok(JointResult {
        agent,
        metrics,
        env_steps,
        updates,
    })
}

/// Stores a trained agent with its provenance.
pub fn save_agent(path: &Path, agent: &Agent, cfg: &ExperimentConfig, env_version: &str, dataset_version: Option<String>) -> Result<CheckpointMeta> {
    let mut meta = CheckpointMeta::new(
        CheckpointKind::Policy,
        serde_json::Value::Null,
        cfg.to_json(),
        cfg.hash(),
        env_version,
        dataset_version,
    );
    meta.extra.insert("unit_cost".into(), cfg.env.unit_cost.into());
    agent.save(path, meta)
}
