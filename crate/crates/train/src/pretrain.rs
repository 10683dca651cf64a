//! Offline VAE training on collected trajectories.

use std::path::Path;
use std::time::Instant;

use afa_core::seed::{derive_seed, rng_for};
use afa_core::{Dataset, EnvDescriptor, TrajectoryRecord};
use afa_models::checkpoint;
use afa_models::elbo::{sample_noise, supervision_masks};
use afa_models::encoding::action_dim;
use afa_models::optim::Adam;
use afa_models::{elbo, CheckpointKind, CheckpointMeta, ParamStore, SeqBatch, SupervisionMode, Vae, VaeConfig};
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Result, TrainError};

/// Rows of the per-epoch metrics file. Reconstruction terms and KL are
/// per-trajectory means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss during the epoch.
    pub train_loss: f64,
    pub train_recon_obs: f64,
    pub train_recon_unobs: f64,
    pub train_kl: f64,
    pub test_recon_obs: f64,
    pub test_recon_unobs: f64,
    pub test_kl: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub config: VaeConfig,
    /// Parameters from the epoch with the lowest test unobserved
    /// reconstruction error.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub dataset_version: String,
}

/// Checks that two datasets come from the same environment.
pub fn require_compatible(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.header.env_version != test.header.env_version || train.header.descriptor != test.header.descriptor {
        return Err(TrainError::Mismatch(format!(
            "train data from {} but test data from {}",
            train.header.env_version, test.header.env_version
        )));
    }
    Ok(())
}

/// Architecture from the configuration, checked against the data.
pub fn vae_config(cfg: &ExperimentConfig, desc: &EnvDescriptor) -> Result<VaeConfig> {
    let vc = cfg
        .vae
        .arch
        .clone()
        .unwrap_or_else(|| VaeConfig::preset(cfg.env.kind, cfg.vae.model, desc));
    vc.validate()?;
    if vc.obs_len != desc.obs_len() || vc.action_dim != action_dim(desc) {
        return Err(TrainError::Mismatch(format!(
            "VAE expects {} entries and {}-wide actions, environment has {} and {}",
            vc.obs_len,
            vc.action_dim,
            desc.obs_len(),
            action_dim(desc)
        )));
    }
    Ok(vc)
}

fn all_masks(records: &[TrajectoryRecord], desc: &EnvDescriptor, mode: SupervisionMode, seed: u64) -> Result<Vec<Vec<Vec<bool>>>> {
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        out.push(supervision_masks(r, desc, mode, seed, i)?);
    }
    Ok(out)
}

/// Mean diagnostics per trajectory over a whole split, without sampling noise.
pub fn evaluate_elbo(
    vae: &Vae,
    records: &[TrajectoryRecord],
    sups: &[Vec<Vec<bool>>],
    desc: &EnvDescriptor,
) -> Result<afa_models::ElboDiagnostics> {
    let mut acc = afa_models::ElboDiagnostics::default();
    let n = records.len();
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let refs: Vec<&TrajectoryRecord> = records[start..end].iter().collect();
        let batch = SeqBatch::from_records(&refs, &sups[start..end], desc, vae.dtype())?;
        let eps = Tensor::zeros((batch.batch_size(), batch.steps(), vae.config().latent_dim), vae.dtype(), vae.device())?;
        let d = elbo(vae, &batch, &eps)?.diagnostics;
        let w = (end - start) as f64 / n as f64;
        acc.loss += d.loss * w;
        acc.recon_obs += d.recon_obs * w;
        acc.recon_unobs += d.recon_unobs * w;
        acc.recon_total += d.recon_total * w;
        acc.kl += d.kl * w;
    }
    Ok(acc)
}

/// Minimises the negative supervised ELBO on `train`, keeping the
/// parameters that do best on unobserved entries of `test`.
pub fn pretrain_vae(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<PretrainResult> {
    require_compatible(train, test)?;
    if train.records.is_empty() || test.records.is_empty() {
        return Err(TrainError::Config("VAE training needs non-empty train and test splits".into()));
    }
    let desc = &train.header.descriptor;
    let vc = vae_config(cfg, desc)?;
    let mut params = ParamStore::new(DType::F32);
    let vae = {
        let mut init = params.initializer(derive_seed(cfg.seed, "vae-init", 0));
        let vae = Vae::new(&vc, &mut init)?;
        init.finish()?;
        vae
    };
    let frozen = Vae::new(&vc, &mut params.frozen())?;
    let mut opt = Adam::new(&params, cfg.vae_learning_rate(), cfg.vae.max_grad_norm)?;
    let sup_seed = derive_seed(cfg.seed, "supervision", 0);
    let train_sups = all_masks(&train.records, desc, cfg.vae.supervision, sup_seed)?;
    let test_sups = all_masks(&test.records, desc, SupervisionMode::Full, sup_seed)?;

    let started = Instant::now();
    let mut history = Vec::with_capacity(cfg.vae.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.records.len()).collect();
    for epoch in 0..cfg.vae.epochs {
        order.shuffle(&mut rng_for(cfg.seed, "vae-shuffle", epoch as u64));
        let mut noise_rng = rng_for(cfg.seed, "vae-noise", epoch as u64);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.vae.batch_size).enumerate() {
            let refs: Vec<&TrajectoryRecord> = chunk.iter().map(|&i| &train.records[i]).collect();
            let sups: Vec<Vec<Vec<bool>>> = chunk.iter().map(|&i| train_sups[i].clone()).collect();
            let batch = SeqBatch::from_records(&refs, &sups, desc, DType::F32)?;
            let eps = sample_noise(&[batch.batch_size(), batch.steps(), vc.latent_dim], DType::F32, &mut noise_rng)?;
            let out = elbo(&vae, &batch, &eps)?;
            if !out.diagnostics.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("{:?}, trajectories {:?}", out.diagnostics, chunk),
                });
            }
            opt.backward_step(&out.loss)?;
            loss_sum += out.diagnostics.loss;
            batches += 1;
        }
        let tr = evaluate_elbo(&frozen, &train.records, &train_sups, desc)?;
        let te = evaluate_elbo(&frozen, &test.records, &test_sups, desc)?;
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_recon_obs: tr.recon_obs,
            train_recon_unobs: tr.recon_unobs,
            train_kl: tr.kl,
            test_recon_obs: te.recon_obs,
            test_recon_unobs: te.recon_unobs,
            test_kl: te.kl,
            wall_seconds: if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, test unobserved {:.4}",
            row.train_loss,
            row.test_recon_unobs
        );
        if best.as_ref().is_none_or(|(b, _, _)| row.test_recon_unobs < *b) {
            best = Some((row.test_recon_unobs, epoch, params.deep_clone()?));
        }
        history.push(row);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(PretrainResult {
        config: vc,
        params,
        best_epoch,
        history,
        dataset_version: train.version(),
    })
}

/// Writes the selected parameters with their provenance.
pub fn save_vae(path: &Path, res: &PretrainResult, cfg: &ExperimentConfig, env_version: &str) -> Result<CheckpointMeta> {
    let mut meta = CheckpointMeta::new(
        CheckpointKind::Vae,
        serde_json::to_value(&res.config).expect("VAE config serializes"),
        cfg.to_json(),
        cfg.hash(),
        env_version,
        Some(res.dataset_version.clone()),
    );
    meta.extra.insert("supervision".into(), cfg.vae.supervision.label().into());
    meta.extra.insert("best_epoch".into(), res.best_epoch.into());
    Ok(checkpoint::save(path, &res.params, meta)?)
}

/// Reads a VAE checkpoint trained on `env_version`.
pub fn load_vae(path: &Path, env_version: &str) -> Result<(VaeConfig, ParamStore, CheckpointMeta)> {
    let ck = checkpoint::load(path)?;
    ck.meta.require_kind(CheckpointKind::Vae)?;
    ck.meta.require_env_version(env_version)?;
    let vc: VaeConfig = serde_json::from_value(ck.meta.model.clone()).map_err(|e| TrainError::Schema {
        path: path.to_path_buf(),
        reason: format!("VAE model: {e}"),
    })?;
    Vae::new(&vc, &mut ck.params.frozen())?;
    Ok((vc, ck.params, ck.meta))
}
