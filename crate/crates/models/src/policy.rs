//! Recurrent actor-critic with task, acquisition and value heads.

use afa_core::{EnvDescriptor, EnvKind, FeatureMask, JointAction};
use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{sigmoid, softplus, LayerSpec, Linear, LstmCell, LstmState, Stack};
use crate::params::{Init, ParamSource};

/// Acquisition logits are clamped to this magnitude when turned into
/// sampling probabilities, keeping them strictly inside (0, 1).
pub const ACQ_LOGIT_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyInput {
    /// Belief state from a frozen VAE.
    Belief,
    /// Zero-imputed observation through the policy's own encoder.
    Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub input: PolicyInput,
    pub input_dim: usize,
    pub encoder: Vec<LayerSpec>,
    pub lstm_hidden: usize,
    pub n_controls: usize,
    pub n_features: usize,
}

impl PolicyConfig {
    /// Reference architecture. `input_dim` is the latent size for belief
    /// inputs and ignored for observation inputs.
    pub fn preset(env: EnvKind, input: PolicyInput, desc: &EnvDescriptor, latent_dim: usize) -> Self {
        let d = LayerSpec::dense;
        let (encoder, hidden) = match (env, input) {
            (EnvKind::BouncingBall, PolicyInput::Belief) => (vec![d(1024, true)], 1024),
            (EnvKind::BouncingBall, PolicyInput::Observation) => (
                vec![
                    LayerSpec::Reshape {
                        shape: vec![1, desc.obs_shape[0], desc.obs_shape[1]],
                    },
                    LayerSpec::conv(16, 4, 2, 1),
                    LayerSpec::conv(32, 4, 2, 1),
                    LayerSpec::Flatten,
                    d(1024, true),
                ],
                1024,
            ),
            (EnvKind::Sepsis, PolicyInput::Belief) => (vec![], 256),
            (EnvKind::Sepsis, PolicyInput::Observation) => (vec![d(32, true), d(64, true), d(32, true)], 256),
        };
        Self {
            input,
            input_dim: match input {
                PolicyInput::Belief => latent_dim,
                PolicyInput::Observation => desc.obs_len(),
            },
            encoder,
            lstm_hidden: hidden,
            n_controls: desc.n_control_actions,
            n_features: desc.n_features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.lstm_hidden == 0 || self.n_controls == 0 || self.n_features == 0 {
            return Err(ModelError::Config("policy sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Head outputs for `n` parallel inputs.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub control_logits: Tensor,
    pub acq_logits: Tensor,
    pub value: Tensor,
    pub state: LstmState,
}

#[derive(Debug, Clone)]
pub struct ActorCritic {
    cfg: PolicyConfig,
    encoder: Stack,
    lstm: LstmCell,
    control_head: Linear,
    acq_head: Linear,
    value_head: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// One sampled (or greedy) joint action with its log-probability and value.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: JointAction,
    pub log_prob: f64,
    pub value: f64,
    pub acq_probs: Vec<f64>,
}

impl ActorCritic {
    pub fn new(cfg: &PolicyConfig, src: &mut dyn ParamSource) -> Result<Self> {
        cfg.validate()?;
        let dense_init = match cfg.input {
            PolicyInput::Belief => Init::NormColumns(1.0),
            PolicyInput::Observation => Init::Orthogonal(1.0),
        };
        let encoder = Stack::new(src, "pi.enc", &cfg.encoder, &[cfg.input_dim], dense_init)?;
        if encoder.out_shape().len() != 1 {
            return Err(ModelError::Config("policy encoder must end flat".into()));
        }
        let lstm = LstmCell::new(src, "pi.lstm", encoder.out_len(), cfg.lstm_hidden, Init::FanInUniform)?;
        let h = cfg.lstm_hidden;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            lstm,
            control_head: Linear::new(src, "pi.control", h, cfg.n_controls, Init::NormColumns(0.01))?,
            acq_head: Linear::new(src, "pi.acquire", h, cfg.n_features, Init::NormColumns(0.01))?,
            value_head: Linear::new(src, "pi.value", h, 1, Init::NormColumns(1.0))?,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn initial_state(&self, n: usize) -> Result<LstmState> {
        self.lstm.zero_state(n)
    }

    fn heads(&self, h: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        Ok((
            self.control_head.forward(h)?,
            self.acq_head.forward(h)?,
            self.value_head.forward(h)?.squeeze(1)?,
        ))
    }

    /// One recurrent step on inputs `(n, input_dim)`.
    pub fn step(&self, input: &Tensor, state: &LstmState) -> Result<PolicyOutput> {
        let x = self.encoder.forward(input)?;
        let state = self.lstm.step(&x, state)?;
        let (control_logits, acq_logits, value) = self.heads(&state.h)?;
        Ok(PolicyOutput {
            control_logits,
            acq_logits,
            value,
            state,
        })
    }

    /// Replays `t` steps of inputs `(t, n, input_dim)` from `start`.
    /// `keep[s]` `(n,)` is 0 where the recurrent state must be reset before
    /// step `s`. Outputs are flattened time-major to `t * n` rows.
    pub fn unroll(&self, inputs: &Tensor, start: &LstmState, keep: &Tensor) -> Result<(Tensor, Tensor, Tensor, LstmState)> {
        let (t, n, d) = inputs.dims3()?;
        let x = self.encoder.forward(&inputs.reshape((t * n, d))?)?.reshape((t, n, ()))?;
        let mut state = start.clone();
        let mut hs = Vec::with_capacity(t);
        for s in 0..t {
            let k = keep.narrow(0, s, 1)?.reshape((n, 1))?;
            state = self.lstm.step(&x.narrow(0, s, 1)?.squeeze(0)?, &state.masked(&k)?)?;
            hs.push(state.h.clone());
        }
        let h = Tensor::cat(&hs, 0)?;
        let (c, a, v) = self.heads(&h)?;
        Ok((c, a, v, state))
    }

    /// Chooses joint actions for every row; row `i` draws from `rngs[i]`.
    pub fn act<R: Rng>(&self, input: &Tensor, state: &LstmState, rngs: &mut [R], mode: ActMode) -> Result<(Vec<Decision>, LstmState)> {
        let out = self.step(input, state)?;
        let decisions = decide(&out, rngs, mode)?;
        Ok((decisions, out.state))
    }
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

/// Turns head outputs into per-row decisions.
pub fn decide<R: Rng>(out: &PolicyOutput, rngs: &mut [R], mode: ActMode) -> Result<Vec<Decision>> {
    let cl = rows(&out.control_logits)?;
    let al = rows(&out.acq_logits)?;
    let v: Vec<f64> = out.value.to_dtype(DType::F64)?.to_vec1()?;
    if rngs.len() != cl.len() {
        return Err(ModelError::Shape(format!("{} generators for {} rows", rngs.len(), cl.len())));
    }
    let mut res = Vec::with_capacity(cl.len());
    for i in 0..cl.len() {
        let (action, acq_probs) = choose(&cl[i], &al[i], &mut rngs[i], mode);
        res.push(Decision {
            log_prob: joint_log_prob(&cl[i], &al[i], &action),
            action,
            value: v[i],
            acq_probs,
        });
    }
    Ok(res)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn acq_probability(logit: f64) -> f64 {
    let l = logit.clamp(-ACQ_LOGIT_CLAMP, ACQ_LOGIT_CLAMP);
    1.0 / (1.0 + (-l).exp())
}

fn choose<R: Rng>(control_logits: &[f64], acq_logits: &[f64], rng: &mut R, mode: ActMode) -> (JointAction, Vec<f64>) {
    let probs: Vec<f64> = acq_logits.iter().map(|&l| acq_probability(l)).collect();
    let (control, bits) = match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for (i, l) in control_logits.iter().enumerate() {
                if *l > control_logits[best] {
                    best = i;
                }
            }
            (best, probs.iter().map(|p| *p > 0.5).collect())
        }
        ActMode::Sample => {
            let lp = log_softmax(control_logits);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut control = lp.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    control = i;
                    break;
                }
            }
            let bits = probs.iter().map(|p| rng.random::<f64>() < *p).collect();
            (control, bits)
        }
    };
    (JointAction::new(control, FeatureMask::new(bits)), probs)
}

/// `log pi_c(control) + sum_i log pi_f(bit_i)` from raw logits.
pub fn joint_log_prob(control_logits: &[f64], acq_logits: &[f64], action: &JointAction) -> f64 {
    let lp = log_softmax(control_logits)[action.control];
    let sp = |x: f64| if x > 30.0 { x } else { x.exp().ln_1p() };
    lp + acq_logits
        .iter()
        .zip(action.acquisition.bits())
        .map(|(&l, &b)| if b { -sp(-l) } else { -sp(l) })
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct A3cHyper {
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// When false the acquisition head is excluded from the policy and
    /// entropy terms (acquisitions come from elsewhere).
    #[serde(default = "default_true")]
    pub train_acquisition: bool,
}

fn default_true() -> bool {
    true
}

impl Default for A3cHyper {
    fn default() -> Self {
        Self {
            value_coef: 0.5,
            entropy_coef: 0.01,
            train_acquisition: true,
        }
    }
}

/// Transitions of one worker with head outputs recomputed under the
/// parameters being trained.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// `(t, n_controls)`
    pub control_logits: Tensor,
    /// `(t, n_features)`
    pub acq_logits: Tensor,
    /// `(t,)`
    pub values: Tensor,
    pub actions: Vec<JointAction>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value estimate after the last transition; ignored if it was terminal.
    pub bootstrap: f64,
}

/// `G_t = (r_t - c_t) + gamma * (1 - done_t) * G_{t+1}` seeded with the
/// bootstrap value.
pub fn n_step_returns(rewards: &[f64], costs: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut g = bootstrap;
    let mut out = vec![0.0; rewards.len()];
    for t in (0..rewards.len()).rev() {
        let next = if dones[t] { 0.0 } else { g };
        g = rewards[t] - costs[t] + gamma * next;
        out[t] = g;
    }
    out
}

#[derive(Debug, Clone)]
pub struct A3cLoss {
    pub total: Tensor,
    pub policy: Tensor,
    pub value: Tensor,
    pub entropy: Tensor,
}

pub fn a3c_loss(r: &Rollout, gamma: f64, hyper: &A3cHyper) -> Result<A3cLoss> {
    let t = r.actions.len();
    if t == 0 {
        return Err(ModelError::EmptyRollout);
    }
    if [r.rewards.len(), r.costs.len(), r.dones.len()].iter().any(|&n| n != t) {
        return Err(ModelError::Shape("rollout sequences differ in length".into()));
    }
    let g = n_step_returns(&r.rewards, &r.costs, &r.dones, r.bootstrap, gamma);
    a3c_loss_with_returns(&r.control_logits, &r.acq_logits, &r.values, &r.actions, &g, hyper)
}

/// Loss over `m` transitions whose returns are already known. Every term
/// is a sum over transitions, so concatenated workers add up.
pub fn a3c_loss_with_returns(
    control_logits: &Tensor,
    acq_logits: &Tensor,
    values: &Tensor,
    actions: &[JointAction],
    returns: &[f64],
    hyper: &A3cHyper,
) -> Result<A3cLoss> {
    let m = actions.len();
    if m == 0 {
        return Err(ModelError::EmptyRollout);
    }
    let (mc, nc) = control_logits.dims2()?;
    let (ma, nf) = acq_logits.dims2()?;
    if mc != m || ma != m || values.dims() != [m] || returns.len() != m {
        return Err(ModelError::Shape(format!("{m} transitions with logits {mc}/{ma}, values {:?}", values.dims())));
    }
    let dtype = control_logits.dtype();
    let dev = Device::Cpu;
    let mut onehot = vec![0f64; m * nc];
    let mut bits = vec![0f64; m * nf];
    for (i, a) in actions.iter().enumerate() {
        if a.control >= nc || a.acquisition.len() != nf {
            return Err(ModelError::Shape(format!("action {i} does not fit the heads")));
        }
        onehot[i * nc + a.control] = 1.0;
        for (k, &b) in a.acquisition.bits().iter().enumerate() {
            bits[i * nf + k] = b as u8 as f64;
        }
    }
    let onehot = Tensor::from_vec(onehot, (m, nc), &dev)?.to_dtype(dtype)?;
    let bits = Tensor::from_vec(bits, (m, nf), &dev)?.to_dtype(dtype)?;
    let g = Tensor::from_vec(returns.to_vec(), m, &dev)?.to_dtype(dtype)?;

    let lsm = candle_nn::ops::log_softmax(control_logits, D::Minus1)?;
    let mut log_prob = lsm.mul(&onehot)?.sum(1)?;
    let cat_entropy = lsm.exp()?.mul(&lsm)?.sum(1)?.neg()?;
    let mut entropy = cat_entropy;
    if hyper.train_acquisition {
        let sp_pos = softplus(acq_logits)?;
        let sp_neg = softplus(&acq_logits.neg()?)?;
        let lp_bits = (sp_neg.mul(&bits)? + sp_pos.mul(&bits.affine(-1.0, 1.0)?)?)?.neg()?;
        log_prob = (log_prob + lp_bits.sum(1)?)?;
        let p = sigmoid(acq_logits)?;
        let h = (p.mul(&sp_neg)? + p.affine(-1.0, 1.0)?.mul(&sp_pos)?)?;
        entropy = (entropy + h.sum(1)?)?;
    }
    let advantage = (&g - values.detach())?;
    let policy = log_prob.mul(&advantage)?.sum_all()?.neg()?;
    let value = (&g - values)?.sqr()?.sum_all()?;
    let entropy = entropy.sum_all()?;
    let total = ((&policy + (&value * hyper.value_coef)?)? - (&entropy * hyper.entropy_coef)?)?;
    Ok(A3cLoss {
        total,
        policy,
        value,
        entropy,
    })
}
