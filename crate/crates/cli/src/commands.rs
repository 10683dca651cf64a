//! Subcommand pipelines. Every command writes the resolved configuration to
//! `config.toml` in its output directory before doing any work.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use afa_core::seed::derive_seed;
use afa_core::Dataset;
use afa_models::{ParamStore, PolicyInput, VaeConfig};
use afa_train::agent::Agent;
use afa_train::collect::collect_dataset;
use afa_train::evaluation::{cost_sweep, imputation_metrics, VaeImputer};
use afa_train::joint::{evaluate_agent, save_agent, train_joint};
use afa_train::metrics::write_csv;
use afa_train::plots::{emit_plots, PlotInput};
use afa_train::pretrain::{load_vae, pretrain_vae, save_vae};
use afa_train::{EnvFactory, ExperimentConfig, TrainError};
use anyhow::{Context, Result};
use serde::Serialize;

use crate::{RunArgs, Task};

/// Environment variable naming the directory relative output paths live under.
pub const OUTPUT_ROOT_VAR: &str = "AFA_OUTPUT_ROOT";

const HEARTBEAT: Duration = Duration::from_secs(60);

/// Logs a liveness line at a fixed interval until dropped.
struct Heartbeat {
    stop: Option<mpsc::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl Heartbeat {
    fn start(task: &'static str) -> Self {
        let (tx, rx) = mpsc::channel::<()>();
        let started = Instant::now();
        let handle = std::thread::spawn(move || loop {
            match rx.recv_timeout(HEARTBEAT) {
                Err(RecvTimeoutError::Timeout) => {
                    log::info!("heartbeat: {task} running for {}s", started.elapsed().as_secs())
                }
                _ => break,
            }
        });
        Self {
            stop: Some(tx),
            handle: Some(handle),
        }
    }
}

impl Drop for Heartbeat {
    fn drop(&mut self) {
        drop(self.stop.take());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Resolves `output_dir` against the output root when it is relative.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    if cfg.output_dir.is_absolute() {
        return cfg.output_dir.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    root.join(&cfg.output_dir)
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    match ExperimentConfig::load(&args.config, &args.overrides) {
        Err(TrainError::Io { path, source }) => Err(TrainError::Config(format!("cannot read {}: {source}", path.display())).into()),
        other => Ok(other?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(task: Task, args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let out = output_dir(&cfg);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let snapshot = format!("# config_hash = \"{}\"\n{}", cfg.hash(), cfg.to_toml()?);
    fs::write(out.join("config.toml"), snapshot).with_context(|| format!("writing config snapshot in {}", out.display()))?;
    log::info!("{} -> {}", task.name(), out.display());
    let _heartbeat = Heartbeat::start(task.name());
    match task {
        Task::Collect => collect(&cfg, &out),
        Task::TrainVae => train_vae(&cfg, &out),
        Task::TrainPolicy => train_policy(&cfg, &out),
        Task::Eval => eval(&cfg, &out),
        Task::Sweep => sweep(&cfg, &out),
        Task::Plot => plot(&cfg, &out),
    }
}

fn collect(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let summary = collect_dataset(cfg, &out.join("data"))?;
    log::info!(
        "wrote {} and {} ({} random, {} policy training trajectories)",
        summary.train_dir.display(),
        summary.test_dir.display(),
        summary.train_random,
        summary.train_policy
    );
    Ok(())
}

/// Reads `data.dir`, collecting a fresh dataset into `out/data` when unset.
fn datasets(cfg: &ExperimentConfig, out: &Path) -> Result<(Dataset, Dataset)> {
    let root = match &cfg.data.dir {
        Some(dir) => dir.clone(),
        None => {
            log::info!("data.dir is unset; collecting a dataset first");
            collect(cfg, out)?;
            out.join("data")
        }
    };
    let read = |split: &str| -> Result<Dataset> {
        let dir = root.join(split);
        Dataset::read(&dir).with_context(|| format!("reading dataset {}", dir.display()))
    };
    Ok((read("train")?, read("test")?))
}

fn train_vae(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train, test) = datasets(cfg, out)?;
    let res = pretrain_vae(cfg, &train, &test)?;
    write_csv(&out.join("vae_metrics.csv"), &res.history)?;
    save_vae(&out.join("vae.safetensors"), &res, cfg, &train.header.env_version)?;
    let metrics = imputation_metrics(&VaeImputer::new(&res.config, &res.params)?, &test)?;
    write_json(&out.join("imputation.json"), &metrics)?;
    log::info!(
        "best epoch {}; test error observed {:.4}, unobserved {:.4}",
        res.best_epoch,
        metrics.observed_err,
        metrics.unobserved_err
    );
    Ok(())
}

/// The pre-trained VAE required by belief-input policies.
fn beliefs(cfg: &ExperimentConfig, factory: &EnvFactory) -> Result<Option<((VaeConfig, ParamStore), Option<String>)>> {
    if cfg.policy.input == PolicyInput::Observation {
        return Ok(None);
    }
    let path = cfg
        .vae
        .checkpoint
        .as_ref()
        .ok_or_else(|| TrainError::Config("belief policies need vae.checkpoint".into()))?;
    let (vc, params, meta) = load_vae(path, factory.version())?;
    Ok(Some(((vc, params), meta.dataset_version)))
}

fn train_policy(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let factory = EnvFactory::from_config(cfg)?;
    let (vae, dataset_version) = match beliefs(cfg, &factory)? {
        Some((v, d)) => (Some(v), d),
        None => (None, None),
    };
    let res = train_joint(cfg, vae, Some(out))?;
    save_agent(&out.join("policy.safetensors"), &res.agent, cfg, factory.version(), dataset_version)?;
    if let Some(last) = res.metrics.last() {
        log::info!(
            "{} env steps, {} updates; final cost-adjusted return {:.3}, acquisitions {:.2}",
            res.env_steps,
            res.updates,
            last.mean_cost_adjusted_return,
            last.mean_episodic_acquisitions
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PolicyEval {
    episodes: usize,
    unit_cost: f64,
    task_reward: f64,
    task_reward_stderr: f64,
    cost_adjusted_return: f64,
    cost_adjusted_return_stderr: f64,
    acquisitions: f64,
    acquisitions_stderr: f64,
    mean_length: f64,
    discharge_rate: Option<f64>,
    mortality_rate: Option<f64>,
}

fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let factory = EnvFactory::from_config(cfg)?;
    let mut done = false;
    if let Some(path) = &cfg.policy.checkpoint {
        let (agent, meta) = Agent::load(path)?;
        meta.require_env_version(factory.version()).map_err(TrainError::from)?;
        let seed = derive_seed(cfg.seed, "evaluation", 0);
        let e = evaluate_agent(&agent, &factory, cfg.env.unit_cost, cfg.policy.eval_episodes, seed)?;
        let finite = |v: f64| v.is_finite().then_some(v);
        let (r, rs) = e.task_reward();
        let (c, cs) = e.cost_adjusted_return();
        let (a, as_) = e.acquisitions();
        let summary = PolicyEval {
            episodes: e.episodes.len(),
            unit_cost: cfg.env.unit_cost,
            task_reward: r,
            task_reward_stderr: rs,
            cost_adjusted_return: c,
            cost_adjusted_return_stderr: cs,
            acquisitions: a,
            acquisitions_stderr: as_,
            mean_length: e.mean_length(),
            discharge_rate: finite(e.discharge_rate()),
            mortality_rate: finite(e.mortality_rate()),
        };
        write_json(&out.join("eval.json"), &summary)?;
        log::info!("policy: cost-adjusted return {c:.3} ± {cs:.3}, acquisitions {a:.2}");
        done = true;
    }
    if let (Some(path), Some(dir)) = (&cfg.vae.checkpoint, &cfg.data.dir) {
        let (vc, params, _) = load_vae(path, factory.version())?;
        let test = Dataset::read(&dir.join("test")).with_context(|| format!("reading {}", dir.join("test").display()))?;
        let metrics = imputation_metrics(&VaeImputer::new(&vc, &params)?, &test)?;
        write_json(&out.join("imputation.json"), &metrics)?;
        log::info!("imputer: observed {:.4}, unobserved {:.4}", metrics.observed_err, metrics.unobserved_err);
        done = true;
    }
    if !done {
        return Err(TrainError::Config("eval needs policy.checkpoint, or vae.checkpoint with data.dir".into()).into());
    }
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let factory = EnvFactory::from_config(cfg)?;
    let vae = beliefs(cfg, &factory)?.map(|(v, _)| v);
    let res = cost_sweep(cfg, &cfg.eval.sweep_costs, &cfg.eval.sweep_seeds, vae, Some(out))?;
    for row in &res.rows {
        log::info!(
            "cost {} seed {}: converged acquisitions {:.2}, cost-adjusted return {:.3}",
            row.cost,
            row.seed,
            row.converged_acquisitions,
            row.converged_cost_adjusted_return
        );
    }
    Ok(())
}

/// Curve label and seed from a metrics path; sweep outputs are laid out as
/// `<label>/seed-<n>/metrics.csv`.
pub fn plot_input(path: &Path) -> PlotInput {
    let name = |p: Option<&Path>| {
        p.and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    };
    let parent = path.parent();
    let dir = name(parent);
    match dir.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
        Some(seed) => PlotInput {
            label: name(parent.and_then(Path::parent)),
            seed,
            path: path.to_path_buf(),
        },
        None => PlotInput {
            label: dir,
            seed: 0,
            path: path.to_path_buf(),
        },
    }
}

fn plot(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let inputs: Vec<PlotInput> = cfg.eval.plot_inputs.iter().map(|p| plot_input(p)).collect();
    let res = emit_plots(&inputs, &out.join("plots"))?;
    log::info!("wrote {} and {} figures", res.tidy.display(), res.figures.len());
    Ok(())
}
