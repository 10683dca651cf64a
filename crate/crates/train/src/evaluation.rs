//! Imputation metrics, random-acquisition baselines and cost sweeps.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use afa_core::{Dataset, EnvDescriptor, TrajectoryRecord};
use afa_models::{Likelihood, ParamStore, SeqBatch, Vae, VaeConfig};
use candle_core::DType;
use serde::Serialize;

use crate::config::{AcquisitionMode, ExperimentConfig};
use crate::error::{Result, TrainError};
use crate::joint::{train_joint, JointResult};
use crate::metrics::{write_csv, MetricsRow};

/// Per-entry predictions for every step of a trajectory batch.
pub trait Imputer {
    fn likelihood(&self) -> Likelihood;

    /// Point prediction (Gaussian mean or probability of a 1) for every
    /// entry of every step, computed from observed entries and actions only.
    fn predict(&self, records: &[&TrajectoryRecord], desc: &EnvDescriptor) -> Result<Vec<Vec<Vec<f32>>>>;
}

/// Decodes the posterior mean of a VAE.
pub struct VaeImputer {
    vae: Vae,
}

impl VaeImputer {
    pub fn new(cfg: &VaeConfig, params: &ParamStore) -> Result<Self> {
        Ok(Self {
            vae: Vae::new(cfg, &mut params.frozen())?,
        })
    }
}

impl Imputer for VaeImputer {
    fn likelihood(&self) -> Likelihood {
        self.vae.config().likelihood
    }

    fn predict(&self, records: &[&TrajectoryRecord], desc: &EnvDescriptor) -> Result<Vec<Vec<Vec<f32>>>> {
        let sups: Vec<Vec<Vec<bool>>> = records.iter().map(|r| r.masks.clone()).collect();
        let batch = SeqBatch::from_records(records, &sups, desc, DType::F32)?;
        let (b, t) = (batch.batch_size(), batch.steps());
        let imputed = self.vae.impute(&batch.obs, &batch.mask)?;
        let q = self.vae.posterior(&imputed, &batch.actions)?;
        let mean = q.mean.reshape((b * t, ()))?;
        let pred = self.vae.predict(&mean)?.reshape((b, t, ()))?.to_vec3::<f32>()?;
        Ok(pred
            .into_iter()
            .zip(records)
            .map(|(mut seq, r)| {
                seq.truncate(r.len());
                seq
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImputationMetrics {
    /// Mean per-entry error on entries the agent acquired.
    pub observed_err: f64,
    /// Mean per-entry error on entries it did not.
    pub unobserved_err: f64,
    pub observed_entries: usize,
    pub unobserved_entries: usize,
}

/// Squared error for Gaussian models, Bernoulli negative log-likelihood
/// for binary ones.
pub fn entry_error(likelihood: Likelihood, prediction: f32, target: f32) -> f64 {
    let (p, x) = (prediction as f64, target as f64);
    match likelihood {
        Likelihood::Gaussian => (p - x).powi(2),
        Likelihood::Binary => {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(x * p.ln() + (1.0 - x) * (1.0 - p).ln())
        }
    }
}

/// Errors of `imputer` on `test`, split by the stored acquisition masks.
pub fn imputation_metrics(imputer: &dyn Imputer, test: &Dataset) -> Result<ImputationMetrics> {
    let desc = &test.header.descriptor;
    let d = desc.obs_len();
    let lik = imputer.likelihood();
    let (mut so, mut su, mut no, mut nu) = (0.0, 0.0, 0usize, 0usize);
    for chunk in test.records.chunks(64) {
        let refs: Vec<&TrajectoryRecord> = chunk.iter().collect();
        let preds = imputer.predict(&refs, desc)?;
        for (r, pred) in chunk.iter().zip(preds) {
            if pred.len() != r.len() {
                return Err(TrainError::Mismatch("imputer returned the wrong number of steps".into()));
            }
            for (step, p) in pred.iter().enumerate() {
                let full = &r.observations[step];
                if full.len() != d || p.len() != d {
                    return Err(TrainError::Mismatch(format!("step {step}: expected {d} full entries")));
                }
                for k in 0..d {
                    let e = entry_error(lik, p[k], full[k]);
                    if r.masks[step][k] {
                        so += e;
                        no += 1;
                    } else {
                        su += e;
                        nu += 1;
                    }
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(ImputationMetrics {
        observed_err: mean(so, no),
        unobserved_err: mean(su, nu),
        observed_entries: no,
        unobserved_entries: nu,
    })
}

/// Trains the task policy with acquisitions drawn i.i.d. with probability `p`.
pub fn random_acquisition_baseline(
    cfg: &ExperimentConfig,
    p: f64,
    vae: Option<(VaeConfig, ParamStore)>,
    out_dir: Option<&Path>,
) -> Result<JointResult> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TrainError::Config(format!("acquisition probability {p} outside [0, 1]")));
    }
    let mut c = cfg.clone();
    c.policy.acquisition = AcquisitionMode::Random(p);
    train_joint(&c, vae, out_dir)
}

/// Mean of the trailing `fraction` of evaluation points.
pub fn converged(rows: &[MetricsRow], fraction: f64, f: impl Fn(&MetricsRow) -> f64) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let k = ((rows.len() as f64 * fraction).ceil() as usize).clamp(1, rows.len());
    rows[rows.len() - k..].iter().map(f).sum::<f64>() / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cost: f64,
    pub seed: u64,
    pub config_hash: String,
    pub converged_acquisitions: f64,
    pub converged_task_reward: f64,
    pub converged_cost_adjusted_return: f64,
    pub total_acquisition_cost: f64,
}

/// Cumulative training acquisition cost against greedy performance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub cost: f64,
    pub seed: u64,
    pub env_steps: u64,
    pub total_acquisition_cost: f64,
    pub mean_task_reward: f64,
    pub mean_cost_adjusted_return: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub trace: Vec<TraceRow>,
    pub runs: Vec<(f64, u64, Vec<MetricsRow>)>,
}

/// Configuration of one sweep cell.
pub fn sweep_cell_config(cfg: &ExperimentConfig, cost: f64, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.env.unit_cost = cost;
    c.policy.cost_schedule.clear();
    c.seed = seed;
    c
}

/// Trains one agent per `(cost, seed)` cell on `jobs` threads. With
/// `out_dir`, each cell writes its metrics under `cost-<c>/seed-<s>/` and
/// the summary and trace tables go to `sweep.csv` and `trace.csv`.
pub fn cost_sweep(
    cfg: &ExperimentConfig,
    costs: &[f64],
    seeds: &[u64],
    vae: Option<(VaeConfig, ParamStore)>,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    if costs.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("a sweep needs at least one cost and one seed".into()));
    }
    let cells: Vec<(f64, u64)> = costs.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<MetricsRow>>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let jobs = cfg.eval.jobs.max(1).min(cells.len());
    let cell_dir = |c: f64, s: u64| -> Option<PathBuf> { out_dir.map(|d| d.join(format!("cost-{c}")).join(format!("seed-{s}"))) };
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (c, s) = cells[i];
                let cc = sweep_cell_config(cfg, c, s);
                log::info!("sweep cell cost {c}, seed {s}");
                let dir = cell_dir(c, s);
                let res = (|| {
                    if let Some(d) = &dir {
                        std::fs::create_dir_all(d).map_err(crate::error::io_err(d))?;
                        std::fs::write(d.join("config.toml"), cc.to_toml()?).map_err(crate::error::io_err(d))?;
                    }
                    Ok(train_joint(&cc, vae.clone(), dir.as_deref())?.metrics)
                })();
                results.lock().expect("sweep results lock")[i] = Some(res);
            });
        }
    });
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    let mut runs = Vec::new();
    let frac = cfg.eval.convergence_fraction;
    for ((c, s), res) in cells.into_iter().zip(results.into_inner().expect("sweep results lock")) {
        let metrics = res.expect("every cell ran")?;
        rows.push(SweepRow {
            cost: c,
            seed: s,
            config_hash: sweep_cell_config(cfg, c, s).hash(),
            converged_acquisitions: converged(&metrics, frac, |m| m.mean_episodic_acquisitions),
            converged_task_reward: converged(&metrics, frac, |m| m.mean_task_reward),
            converged_cost_adjusted_return: converged(&metrics, frac, |m| m.mean_cost_adjusted_return),
            total_acquisition_cost: metrics.last().map(|m| m.total_acquisition_cost).unwrap_or(0.0),
        });
        for m in &metrics {
            trace.push(TraceRow {
                cost: c,
                seed: s,
                env_steps: m.env_steps,
                total_acquisition_cost: m.total_acquisition_cost,
                mean_task_reward: m.mean_task_reward,
                mean_cost_adjusted_return: m.mean_cost_adjusted_return,
            });
        }
        runs.push((c, s, metrics));
    }
    if let Some(d) = out_dir {
        write_csv(&d.join("sweep.csv"), &rows)?;
        write_csv(&d.join("trace.csv"), &trace)?;
    }
    Ok(SweepResult { rows, trace, runs })
}
