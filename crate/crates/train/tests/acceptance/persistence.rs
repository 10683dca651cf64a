//! Reproducibility of a short end-to-end run and integrity of stored artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use afa_core::{Dataset, EnvKind};
use afa_train::agent::Agent;
use afa_train::collect::collect_dataset;
use afa_train::joint::{save_agent, train_joint};
use afa_train::metrics::{read_metrics, write_csv};
use afa_train::pretrain::{load_vae, pretrain_vae, save_vae};
use afa_train::ExperimentConfig;

use crate::Outcome;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(EnvKind::Sepsis);
    cfg.seed = 7;
    cfg.deterministic = true;
    cfg.data.train_trajectories = 40;
    cfg.data.test_trajectories = 20;
    cfg.data.random_only = true;
    cfg.vae.epochs = 3;
    cfg.policy.workers = 4;
    cfg.policy.total_env_steps = 4_000;
    cfg.policy.eval_interval = 1_000;
    cfg.policy.eval_episodes = 10;
    cfg.policy.lstm_hidden = Some(32);
    cfg
}

fn err(e: impl ToString) -> String {
    e.to_string()
}

/// Collects, pre-trains and trains into `dir`; returns the written files.
fn pipeline(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let cfg = small_config();
    collect_dataset(&cfg, &dir.join("data")).map_err(err)?;
    let train = Dataset::read(&dir.join("data/train")).map_err(err)?;
    let test = Dataset::read(&dir.join("data/test")).map_err(err)?;
    let res = pretrain_vae(&cfg, &train, &test).map_err(err)?;
    write_csv(&dir.join("vae_metrics.csv"), &res.history).map_err(err)?;
    save_vae(&dir.join("vae.safetensors"), &res, &cfg, &train.header.env_version).map_err(err)?;
    let joint = train_joint(&cfg, Some((res.config.clone(), res.params.clone())), Some(dir)).map_err(err)?;
    save_agent(&dir.join("policy.safetensors"), &joint.agent, &cfg, &train.header.env_version, Some(train.version()))
        .map_err(err)?;
    Ok(["vae_metrics.csv", "metrics.csv", "vae.safetensors", "policy.safetensors", "data/train/data.bin"]
        .iter()
        .map(|f| dir.join(f))
        .collect())
}

fn identical_runs(a: &Path, b: &Path) -> Result<String, String> {
    let fa = pipeline(a)?;
    let fb = pipeline(b)?;
    for (x, y) in fa.iter().zip(&fb) {
        let (bx, by) = (fs::read(x).map_err(err)?, fs::read(y).map_err(err)?);
        if bx != by {
            return Err(format!("{} differs between runs", x.display()));
        }
    }
    Ok(format!("{} artifacts identical across runs", fa.len()))
}

fn round_trips(dir: &Path) -> Result<String, String> {
    let train = Dataset::read(&dir.join("data/train")).map_err(err)?;
    let copy = dir.join("copy");
    train.write(&copy).map_err(err)?;
    let again = Dataset::read(&copy).map_err(err)?;
    if again != train {
        return Err("dataset changed after a write and read".into());
    }
    for f in ["data.bin", "manifest.json"] {
        if fs::read(copy.join(f)).map_err(err)? != fs::read(dir.join("data/train").join(f)).map_err(err)? {
            return Err(format!("rewritten {f} is not byte-identical"));
        }
    }

    let env_version = train.header.env_version.clone();
    let (vc, params, meta) = load_vae(&dir.join("vae.safetensors"), &env_version).map_err(err)?;
    let test = Dataset::read(&dir.join("data/test")).map_err(err)?;
    let cfg = small_config();
    let fresh = pretrain_vae(&cfg, &train, &test).map_err(err)?;
    if params.to_f32_bytes().map_err(err)? != fresh.params.to_f32_bytes().map_err(err)? || vc != fresh.config {
        return Err("VAE checkpoint does not reload bit-exactly".into());
    }
    let resaved = dir.join("vae-again.safetensors");
    afa_models::checkpoint::save(&resaved, &params, meta).map_err(err)?;
    if fs::read(&resaved).map_err(err)? != fs::read(dir.join("vae.safetensors")).map_err(err)? {
        return Err("VAE checkpoint is not byte-stable across save and load".into());
    }

    let (agent, _) = Agent::load(&dir.join("policy.safetensors")).map_err(err)?;
    let joint = train_joint(&cfg, Some((fresh.config, fresh.params)), None).map_err(err)?;
    if agent.digest().map_err(err)? != joint.agent.digest().map_err(err)? {
        return Err("policy checkpoint does not reload bit-exactly".into());
    }
    Ok("dataset, VAE and policy round trips exact".into())
}

fn truncate(path: &Path, keep: f64) -> Result<(), String> {
    let bytes = fs::read(path).map_err(err)?;
    let n = ((bytes.len() as f64) * keep) as usize;
    fs::write(path, &bytes[..n.min(bytes.len() - 1)]).map_err(err)
}

fn truncation(dir: &Path) -> Result<String, String> {
    let mut caught = Vec::new();
    let env_version = Dataset::read(&dir.join("data/train")).map_err(err)?.header.env_version;

    truncate(&dir.join("copy/data.bin"), 0.9)?;
    match Dataset::read(&dir.join("copy")) {
        Ok(_) => return Err("truncated dataset was accepted".into()),
        Err(e) => caught.push(format!("dataset: {e}")),
    }

    for name in ["vae.safetensors", "policy.safetensors"] {
        let path = dir.join(name);
        truncate(&path, 0.7)?;
        let loaded = if name.starts_with("vae") {
            load_vae(&path, &env_version).map(|_| ())
        } else {
            Agent::load(&path).map(|_| ())
        };
        match loaded {
            Ok(_) => return Err(format!("truncated {name} was accepted")),
            Err(e) => caught.push(format!("{name}: {e}")),
        }
    }

    // Cut inside the last row so the final record is incomplete.
    let metrics = dir.join("metrics.csv");
    let text = fs::read_to_string(&metrics).map_err(err)?;
    let trimmed = text.trim_end();
    let last_row = trimmed.rfind('\n').ok_or("metrics file has no data rows")?;
    let cut = last_row + (trimmed.len() - last_row) / 2;
    fs::write(&metrics, &trimmed[..cut]).map_err(err)?;
    match read_metrics(&metrics) {
        Ok(_) => return Err("truncated metrics file was accepted".into()),
        Err(e) => caught.push(format!("metrics: {e}")),
    }
    Ok(format!("{} truncated files rejected", caught.len()))
}

pub fn determinism_and_persistence() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let same = identical_runs(a.path(), b.path())?;
    let trips = round_trips(a.path())?;
    let cut = truncation(a.path())?;
    Ok(format!("{same}; {trips}; {cut}"))
}
