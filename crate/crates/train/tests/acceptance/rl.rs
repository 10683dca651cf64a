//! Short joint-training runs on Sepsis with pre-trained beliefs.

use afa_models::{ParamStore, VaeConfig};
use afa_train::evaluation::{converged, cost_sweep};
use afa_train::joint::train_joint;
use afa_train::pretrain::pretrain_vae;
use afa_train::{AcquisitionMode, ExperimentConfig};

use crate::desk::{base_config, datasets, SEEDS};
use crate::Outcome;

const STEPS: u64 = 300_000;

fn rl_config(seed: u64) -> ExperimentConfig {
    let mut cfg = base_config();
    cfg.seed = seed;
    cfg.deterministic = true;
    cfg.env.unit_cost = 0.01;
    cfg.policy.workers = 4;
    cfg.policy.total_env_steps = STEPS;
    cfg.policy.eval_interval = STEPS / 6;
    cfg.policy.lstm_hidden = Some(64);
    cfg
}

fn beliefs(seed: u64) -> Result<(VaeConfig, ParamStore), String> {
    let (train, test) = datasets().as_ref().map_err(Clone::clone)?;
    let res = pretrain_vae(&rl_config(seed), train, test).map_err(|e| e.to_string())?;
    Ok((res.config, res.params))
}

pub fn smoke() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = rl_config(seed);
        let vae = beliefs(seed)?;
        let learned = train_joint(&cfg, Some(vae.clone()), None).map_err(|e| e.to_string())?;
        let mut random_cfg = cfg.clone();
        random_cfg.policy.acquisition = AcquisitionMode::Random(0.5);
        let random = train_joint(&random_cfg, Some(vae), None).map_err(|e| e.to_string())?;
        let first = learned.metrics.first().ok_or("no evaluation rows")?;
        let untrained = first.mean_cost_adjusted_return;
        let last = |rows: &[afa_train::metrics::MetricsRow]| rows.last().map(|m| m.mean_cost_adjusted_return);
        let (trained, baseline) = (last(&learned.metrics).ok_or("no rows")?, last(&random.metrics).ok_or("no rows")?);
        let ok = trained > untrained && trained > baseline;
        wins += ok as usize;
        lines.push(format!(
            "seed {seed}: trained {trained:.3}, untrained {untrained:.3}, random acquisition {baseline:.3}{}",
            if ok { "" } else { " (not better)" }
        ));
    }
    let msg = format!("trained policy best in {wins}/3 seeds [{}]", lines.join("; "));
    if wins >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn cost_monotonicity() -> Outcome {
    let costs = [0.0, 0.01, 0.025];
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = rl_config(seed);
        let res = cost_sweep(&cfg, &costs, &[seed], Some(beliefs(seed)?), None).map_err(|e| e.to_string())?;
        let acq: Vec<f64> = costs
            .iter()
            .map(|&c| {
                let (_, _, rows) = res.runs.iter().find(|(rc, _, _)| *rc == c).expect("every cost ran");
                converged(rows, cfg.eval.convergence_fraction, |m| m.mean_episodic_acquisitions)
            })
            .collect();
        let ok = acq.windows(2).all(|w| w[0] >= w[1]);
        wins += ok as usize;
        lines.push(format!(
            "seed {seed}: {}{}",
            acq.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" >= "),
            if ok { "" } else { " (increasing)" }
        ));
    }
    let msg = format!("acquisitions non-increasing in cost in {wins}/3 seeds [{}]", lines.join("; "));
    if wins >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
