//! Independent double-precision recomputation of the bound and of the
//! actor-critic surrogate, written term by term with plain loops.

use std::cell::RefCell;
use std::f64::consts::PI;

use afa_core::{EnvDescriptor, JointAction, TrajectoryRecord};
use afa_models::nn::LayerSpec;
use afa_models::{Likelihood, ParamStore, VaeConfig, VaeKind};

fn values(store: &ParamStore, name: &str) -> Vec<f64> {
    let var = store.get(name).unwrap_or_else(|_| panic!("parameter {name}"));
    var.as_tensor()
        .flatten_all()
        .and_then(|t| t.to_dtype(candle_core::DType::F64))
        .and_then(|t| t.to_vec1())
        .expect("parameter values")
}

/// `y_j = b_j + sum_i x_i W_ij` with `W` stored row-major as `(in, out)`.
fn affine(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = values(store, &format!("{name}.weight"));
    let b = values(store, &format!("{name}.bias"));
    let out = b.len();
    assert_eq!(w.len(), x.len() * out, "{name}: weight does not fit the input");
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

thread_local! {
    static RELU_SIGNS: RefCell<Option<Vec<bool>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns the sign of every rectifier input it evaluated.
/// Finite differences are only meaningful when this pattern is the same
/// on both sides of a probe.
pub fn relu_pattern(f: impl FnOnce()) -> Vec<bool> {
    RELU_SIGNS.with(|s| *s.borrow_mut() = Some(Vec::new()));
    f();
    RELU_SIGNS.with(|s| s.borrow_mut().take()).unwrap_or_default()
}

fn stack(store: &ParamStore, name: &str, specs: &[LayerSpec], x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    for (k, spec) in specs.iter().enumerate() {
        match spec {
            LayerSpec::Dense { relu, .. } => {
                x = affine(store, &format!("{name}.{k}"), &x);
                if *relu {
                    RELU_SIGNS.with(|s| {
                        if let Some(signs) = s.borrow_mut().as_mut() {
                            signs.extend(x.iter().map(|v| *v > 0.0));
                        }
                    });
                    x.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            LayerSpec::Reshape { .. } | LayerSpec::Flatten => {}
            other => panic!("oracle handles dense stacks only, got {other:?}"),
        }
    }
    x
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gates ordered input, forget, cell, output over `[x, h]`.
fn lstm(store: &ParamStore, name: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let g = affine(store, name, &xh);
    let n = h.len();
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for j in 0..n {
        let i = sigmoid(g[j]);
        let f = sigmoid(g[n + j]);
        let cell = g[2 * n + j].tanh();
        let o = sigmoid(g[3 * n + j]);
        c2[j] = f * c[j] + i * cell;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ElboTerms {
    pub loss: f64,
    pub recon_obs: f64,
    pub recon_unobs: f64,
    pub recon_total: f64,
    pub kl: f64,
}

fn previous_action(desc: &EnvDescriptor, r: &TrajectoryRecord, t: usize) -> Vec<f64> {
    let mut a = vec![0.0; desc.n_control_actions + desc.n_features];
    if t > 0 {
        a[r.controls[t - 1] as usize] = 1.0;
        for (i, &bit) in r.acquisitions[t - 1].bits().iter().enumerate() {
            if bit {
                a[desc.n_control_actions + i] = 1.0;
            }
        }
    }
    a
}

fn entry_nll(likelihood: Likelihood, out: &[f64], d: usize, k: usize, x: f64) -> f64 {
    match likelihood {
        Likelihood::Gaussian => 0.5 * (out[k] - x).powi(2) + 0.5 * (2.0 * PI).ln(),
        Likelihood::Binary => {
            let (l0, l1) = (out[k], out[d + k]);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            lse - if x > 0.5 { l1 } else { l0 }
        }
    }
}

/// Negative bound with one sample per step, summed over steps, entries and
/// latent dimensions and averaged over trajectories.
pub fn elbo(
    cfg: &VaeConfig,
    store: &ParamStore,
    desc: &EnvDescriptor,
    records: &[TrajectoryRecord],
    sups: &[Vec<Vec<bool>>],
    eps: &[Vec<Vec<f64>>],
) -> ElboTerms {
    let d = cfg.obs_len;
    let mut sum = ElboTerms::default();
    for (i, r) in records.iter().enumerate() {
        let mut h = vec![0.0; cfg.rnn_hidden];
        let mut c = vec![0.0; cfg.rnn_hidden];
        for t in 0..r.len() {
            let imputed: Vec<f64> = (0..d)
                .map(|k| {
                    if r.masks[t][k] {
                        r.observations[t][k] as f64
                    } else {
                        cfg.imputer.fill_value as f64
                    }
                })
                .collect();
            let feat = match cfg.kind {
                VaeKind::NonseqZi => stack(store, "enc.obs", &cfg.obs_encoder, &imputed),
                VaeKind::SeqPoVae => {
                    let fx = stack(store, "enc.obs", &cfg.obs_encoder, &imputed);
                    let fa = stack(store, "enc.action", &cfg.action_encoder, &previous_action(desc, r, t));
                    let prod: Vec<f64> = fx.iter().zip(&fa).map(|(a, b)| a * b).collect();
                    let cat: Vec<f64> = fx.iter().chain(&fa).chain(&prod).copied().collect();
                    let u = stack(store, "enc.fusion", &cfg.fusion, &cat);
                    (h, c) = lstm(store, "enc.rnn", &u, &h, &c);
                    h.clone()
                }
            };
            let mean = affine(store, "enc.mean", &feat);
            let log_var = affine(store, "enc.log_var", &feat);
            let z: Vec<f64> = (0..cfg.latent_dim)
                .map(|j| mean[j] + (0.5 * log_var[j]).exp() * eps[i][t][j])
                .collect();
            for j in 0..cfg.latent_dim {
                sum.kl += 0.5 * (mean[j] * mean[j] + log_var[j].exp() - 1.0 - log_var[j]);
            }
            let out = stack(store, "dec", &cfg.decoder, &z);
            for k in 0..d {
                let nll = entry_nll(cfg.likelihood, &out, d, k, r.observations[t][k] as f64);
                sum.recon_total += nll;
                if r.masks[t][k] {
                    sum.recon_obs += nll;
                } else if sups[i][t][k] {
                    sum.recon_unobs += nll;
                }
            }
        }
    }
    let b = records.len() as f64;
    let mut out = ElboTerms {
        loss: 0.0,
        recon_obs: sum.recon_obs / b,
        recon_unobs: sum.recon_unobs / b,
        recon_total: sum.recon_total / b,
        kl: sum.kl / b,
    };
    out.loss = out.recon_obs + out.recon_unobs + cfg.beta * out.kl;
    out
}

fn log_softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
    l.iter().map(|v| v - m - z.ln()).collect()
}

/// Actor-critic surrogate with the advantages held fixed at `advantages`.
#[allow(clippy::too_many_arguments)]
pub fn a3c_surrogate(
    control_logits: &[Vec<f64>],
    acq_logits: &[Vec<f64>],
    values: &[f64],
    actions: &[JointAction],
    returns: &[f64],
    advantages: &[f64],
    value_coef: f64,
    entropy_coef: f64,
) -> f64 {
    let mut total = 0.0;
    for t in 0..actions.len() {
        let lp = log_softmax(&control_logits[t]);
        let mut log_prob = lp[actions[t].control];
        let mut entropy = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
        for (k, &l) in acq_logits[t].iter().enumerate() {
            let p = sigmoid(l);
            log_prob += if actions[t].acquisition.bits()[k] { p.ln() } else { (1.0 - p).ln() };
            entropy -= p * p.ln() + (1.0 - p) * (1.0 - p).ln();
        }
        total += -log_prob * advantages[t] + value_coef * (returns[t] - values[t]).powi(2) - entropy_coef * entropy;
    }
    total
}

/// `G_t = r_t - c_t + gamma * G_{t+1}`, cut at terminal steps.
pub fn returns(rewards: &[f64], costs: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut g = vec![0.0; n];
    for t in (0..n).rev() {
        let next = if dones[t] {
            0.0
        } else if t + 1 == n {
            bootstrap
        } else {
            g[t + 1]
        };
        g[t] = rewards[t] - costs[t] + gamma * next;
    }
    g
}
