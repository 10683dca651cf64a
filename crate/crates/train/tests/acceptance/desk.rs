//! Desk-scale imputation comparisons on a small random-policy Sepsis dataset.

use std::sync::OnceLock;

use afa_core::{Dataset, EnvKind};
use afa_models::{SupervisionMode, VaeKind};
use afa_train::collect::collect_dataset;
use afa_train::evaluation::{imputation_metrics, VaeImputer};
use afa_train::pretrain::pretrain_vae;
use afa_train::ExperimentConfig;

use crate::Outcome;

pub const SEEDS: [u64; 3] = [0, 1, 2];

/// The five trained variants, in reporting order.
pub const VARIANTS: [(VaeKind, SupervisionMode); 5] = [
    (VaeKind::SeqPoVae, SupervisionMode::Full),
    (VaeKind::NonseqZi, SupervisionMode::Full),
    (VaeKind::NonseqZi, SupervisionMode::Partial),
    (VaeKind::SeqPoVae, SupervisionMode::Fraction(0.9)),
    (VaeKind::SeqPoVae, SupervisionMode::Fraction(0.5)),
];

pub fn base_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(EnvKind::Sepsis);
    cfg.data.train_trajectories = 200;
    cfg.data.test_trajectories = 200;
    cfg.data.random_only = true;
    cfg.vae.epochs = 20;
    cfg
}

/// Train and test splits shared by every desk-scale check.
pub fn datasets() -> &'static Result<(Dataset, Dataset), String> {
    static DATA: OnceLock<Result<(Dataset, Dataset), String>> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        collect_dataset(&base_config(), dir.path()).map_err(|e| e.to_string())?;
        let read = |split: &str| Dataset::read(&dir.path().join(split)).map_err(|e| e.to_string());
        Ok((read("train")?, read("test")?))
    })
}

/// Unobserved test error for every variant and seed, indexed `[seed][variant]`.
fn errors() -> &'static Result<Vec<[f64; 5]>, String> {
    static ERRORS: OnceLock<Result<Vec<[f64; 5]>, String>> = OnceLock::new();
    ERRORS.get_or_init(|| {
        let (train, test) = datasets().as_ref().map_err(Clone::clone)?;
        let mut out = Vec::new();
        for seed in SEEDS {
            let mut row = [0.0; 5];
            for (slot, (kind, sup)) in row.iter_mut().zip(VARIANTS) {
                let mut cfg = base_config();
                cfg.seed = seed;
                cfg.vae.model = kind;
                cfg.vae.supervision = sup;
                let res = pretrain_vae(&cfg, train, test).map_err(|e| e.to_string())?;
                let imputer = VaeImputer::new(&res.config, &res.params).map_err(|e| e.to_string())?;
                *slot = imputation_metrics(&imputer, test).map_err(|e| e.to_string())?.unobserved_err;
            }
            out.push(row);
        }
        Ok(out)
    })
}

fn verdict(name: &str, errs: &[[f64; 5]], cols: [usize; 3]) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for (seed, row) in SEEDS.iter().zip(errs) {
        let [a, b, c] = cols.map(|i| row[i]);
        let ok = a < b && b < c;
        wins += ok as usize;
        lines.push(format!("seed {seed}: {a:.4} {b:.4} {c:.4}{}", if ok { "" } else { " (out of order)" }));
    }
    let msg = format!("{name} ordered in {wins}/3 seeds [{}]", lines.join("; "));
    if wins >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn model_ordering() -> Outcome {
    let errs = errors().as_ref().map_err(Clone::clone)?;
    verdict("seq-full < nonseq-full < nonseq-partial", errs, [0, 1, 2])
}

/// Non-strict ordering of the sequential model across supervision levels.
pub fn observability_ordering() -> Outcome {
    let errs = errors().as_ref().map_err(Clone::clone)?;
    let mut wins = 0;
    let mut lines = Vec::new();
    for (seed, row) in SEEDS.iter().zip(errs) {
        let (full, ninety, half) = (row[0], row[3], row[4]);
        let ok = full <= ninety && ninety <= half;
        wins += ok as usize;
        lines.push(format!("seed {seed}: {full:.4} {ninety:.4} {half:.4}{}", if ok { "" } else { " (out of order)" }));
    }
    let msg = format!("full <= 90% <= 50% in {wins}/3 seeds [{}]", lines.join("; "));
    if wins >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
