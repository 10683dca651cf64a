//! Non-sequential and sequential partially observed VAEs.

use afa_core::{EnvDescriptor, EnvKind};
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoding::{action_dim, ImputerConfig};
use crate::error::{ModelError, Result};
use crate::nn::{sigmoid, LayerSpec, Linear, LstmCell, LstmState, Stack};
use crate::params::{Init, ParamSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VaeKind {
    /// Recurrent filter over observed features and previous actions.
    SeqPoVae,
    /// Per-step encoder on the zero-imputed observation.
    NonseqZi,
}

impl VaeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SeqPoVae => "seq-po-vae",
            Self::NonseqZi => "nonseq-zi",
        }
    }
}

/// Per-entry reconstruction likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Unit-variance Gaussian; the decoder emits means of shape `(obs_len,)`.
    Gaussian,
    /// Two-class categorical per binary entry; the decoder emits logits of
    /// shape `(2, ...)` whose trailing axes flatten to `obs_len`.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub kind: VaeKind,
    pub obs_len: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub imputer: ImputerConfig,
    pub likelihood: Likelihood,
    pub obs_encoder: Vec<LayerSpec>,
    /// Sequential model only.
    #[serde(default)]
    pub action_encoder: Vec<LayerSpec>,
    /// Sequential model only: layers applied to `[f_x, f_a, f_x * f_a]`.
    #[serde(default)]
    pub fusion: Vec<LayerSpec>,
    /// Sequential model only.
    #[serde(default)]
    pub rnn_hidden: usize,
    pub decoder: Vec<LayerSpec>,
}

fn dense(out: usize, relu: bool) -> LayerSpec {
    LayerSpec::dense(out, relu)
}

impl VaeConfig {
    /// Reference architecture for an environment.
    pub fn preset(env: EnvKind, kind: VaeKind, desc: &EnvDescriptor) -> Self {
        let obs_len = desc.obs_len();
        let adim = action_dim(desc);
        match env {
            EnvKind::Sepsis => {
                let decoder = vec![dense(64, true), dense(64, true), dense(32, true), dense(obs_len, false)];
                let base = Self {
                    kind,
                    obs_len,
                    action_dim: adim,
                    latent_dim: 10,
                    beta: 0.01,
                    imputer: ImputerConfig::SEPSIS,
                    likelihood: Likelihood::Gaussian,
                    obs_encoder: vec![],
                    action_encoder: vec![],
                    fusion: vec![],
                    rnn_hidden: 0,
                    decoder,
                };
                match kind {
                    VaeKind::NonseqZi => Self {
                        obs_encoder: vec![dense(32, true), dense(64, false)],
                        ..base
                    },
                    VaeKind::SeqPoVae => Self {
                        obs_encoder: vec![dense(32, true), dense(16, true), dense(10, false)],
                        action_encoder: vec![dense(10, false)],
                        fusion: vec![dense(64, true), dense(32, true)],
                        rnn_hidden: 32,
                        ..base
                    },
                }
            }
            EnvKind::BouncingBall => {
                let side = desc.obs_shape[0];
                let image = LayerSpec::Reshape {
                    shape: vec![1, side, desc.obs_shape[1]],
                };
                let decoder = vec![
                    dense(256, true),
                    LayerSpec::Reshape {
                        shape: vec![4, side / 4, side / 4],
                    },
                    LayerSpec::deconv(32, 4, 2, 1, true),
                    LayerSpec::deconv(32, 4, 2, 1, true),
                    LayerSpec::deconv(2, 3, 1, 1, false),
                ];
                let base = Self {
                    kind,
                    obs_len,
                    action_dim: adim,
                    latent_dim: 32,
                    beta: 1.0,
                    imputer: ImputerConfig::BOUNCING_BALL,
                    likelihood: Likelihood::Binary,
                    obs_encoder: vec![],
                    action_encoder: vec![],
                    fusion: vec![],
                    rnn_hidden: 0,
                    decoder,
                };
                match kind {
                    VaeKind::NonseqZi => Self {
                        obs_encoder: vec![
                            image,
                            LayerSpec::conv(32, 4, 2, 1),
                            LayerSpec::conv(64, 4, 2, 1),
                            LayerSpec::Flatten,
                            dense(256, true),
                        ],
                        ..base
                    },
                    VaeKind::SeqPoVae => Self {
                        obs_encoder: vec![
                            image,
                            LayerSpec::conv(32, 4, 2, 1),
                            LayerSpec::conv(32, 4, 2, 1),
                            LayerSpec::conv(32, 4, 2, 1),
                            LayerSpec::Flatten,
                            dense(32, false),
                        ],
                        action_encoder: vec![dense(32, false)],
                        fusion: vec![dense(64, true), dense(32, true)],
                        rnn_hidden: 32,
                        ..base
                    },
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.latent_dim == 0 || self.obs_len == 0 {
            return bad("latent_dim and obs_len must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if self.kind == VaeKind::SeqPoVae && (self.rnn_hidden == 0 || self.action_encoder.is_empty()) {
            return bad("sequential model needs rnn_hidden > 0 and an action encoder");
        }
        Ok(())
    }
}

/// Diagonal Gaussian over latents; leading axes are batch (and time).
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl LatentDistribution {
    /// Belief state: the posterior mean.
    pub fn belief(&self) -> Tensor {
        self.mean.clone()
    }

    /// `mean + exp(log_var / 2) * eps`.
    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + (self.log_var.clone() * 0.5)?.exp()?.mul(eps)?)?)
    }

    /// Elementwise `KL(q || N(0, 1))`.
    pub fn kl_elements(&self) -> Result<Tensor> {
        let v = self.log_var.exp()?;
        // Cancellation near the prior can round the exact value below zero.
        Ok((((self.mean.sqr()? + v)? - 1.0)? - &self.log_var)?.affine(0.5, 0.0)?.relu()?)
    }
}

/// Recurrent state of the sequential filter.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub lstm: LstmState,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct Vae {
    cfg: VaeConfig,
    obs_encoder: Stack,
    action_encoder: Option<Stack>,
    fusion: Option<Stack>,
    rnn: Option<LstmCell>,
    mean_head: Linear,
    log_var_head: Linear,
    decoder: Stack,
    device: Device,
    dtype: DType,
}

impl Vae {
    pub fn new(cfg: &VaeConfig, src: &mut dyn ParamSource) -> Result<Self> {
        cfg.validate()?;
        let init = Init::FanInUniform;
        let obs_encoder = Stack::new(src, "enc.obs", &cfg.obs_encoder, &[cfg.obs_len], init)?;
        let (action_encoder, fusion, rnn, head_in) = match cfg.kind {
            VaeKind::NonseqZi => (None, None, None, obs_encoder.out_len()),
            VaeKind::SeqPoVae => {
                let act = Stack::new(src, "enc.action", &cfg.action_encoder, &[cfg.action_dim], init)?;
                let (fx, fa) = (obs_encoder.out_len(), act.out_len());
                if fx != fa {
                    return Err(ModelError::Config(format!(
                        "observation embedding ({fx}) and action embedding ({fa}) must match"
                    )));
                }
                let fusion = Stack::new(src, "enc.fusion", &cfg.fusion, &[3 * fx], init)?;
                let rnn = LstmCell::new(src, "enc.rnn", fusion.out_len(), cfg.rnn_hidden, init)?;
                (Some(act), Some(fusion), Some(rnn), cfg.rnn_hidden)
            }
        };
        let mean_head = Linear::new(src, "enc.mean", head_in, cfg.latent_dim, init)?;
        let log_var_head = Linear::new(src, "enc.log_var", head_in, cfg.latent_dim, init)?;
        let decoder = Stack::new(src, "dec", &cfg.decoder, &[cfg.latent_dim], init)?;
        let out = decoder.out_shape();
        let ok = match cfg.likelihood {
            Likelihood::Gaussian => out == [cfg.obs_len],
            Likelihood::Binary => out.len() >= 2 && out[0] == 2 && out[1..].iter().product::<usize>() == cfg.obs_len,
        };
        if !ok {
            return Err(ModelError::Config(format!(
                "decoder output {out:?} does not fit {:?} likelihood over {} entries",
                cfg.likelihood, cfg.obs_len
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            obs_encoder,
            action_encoder,
            fusion,
            rnn,
            mean_head,
            log_var_head,
            decoder,
            device: Device::Cpu,
            dtype: src.dtype(),
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Zero-imputation on tensors: `obs * mask + fill * (1 - mask)`.
    pub fn impute(&self, obs: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let fill = self.cfg.imputer.fill_value as f64;
        let hidden = mask.affine(-1.0, 1.0)?;
        Ok((obs.mul(mask)? + hidden.affine(fill, 0.0)?)?)
    }

    fn heads(&self, h: &Tensor) -> Result<LatentDistribution> {
        Ok(LatentDistribution {
            mean: self.mean_head.forward(h)?,
            log_var: self.log_var_head.forward(h)?,
        })
    }

    /// Single-step posterior from an imputed observation `(n, obs_len)`.
    pub fn encode_nonseq(&self, imputed: &Tensor) -> Result<LatentDistribution> {
        if self.cfg.kind != VaeKind::NonseqZi {
            return Err(ModelError::Config("encode_nonseq needs a non-sequential model".into()));
        }
        self.heads(&self.obs_encoder.forward(imputed)?)
    }

    fn fuse(&self, imputed: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let (Some(act), Some(fusion)) = (&self.action_encoder, &self.fusion) else {
            return Err(ModelError::Config("filtering needs a sequential model".into()));
        };
        let fx = self.obs_encoder.forward(imputed)?;
        let fa = act.forward(actions)?;
        let fc = Tensor::cat(&[&fx, &fa, &(&fx * &fa)?], 1)?;
        fusion.forward(&fc)
    }

    fn rnn(&self) -> Result<&LstmCell> {
        self.rnn
            .as_ref()
            .ok_or_else(|| ModelError::Config("filtering needs a sequential model".into()))
    }

    /// Zero recurrent state for `n` parallel sequences.
    pub fn filter_reset(&self, n: usize) -> Result<FilterState> {
        Ok(FilterState {
            lstm: self.rnn()?.zero_state(n)?,
            step: 0,
        })
    }

    /// One filtering step from an imputed observation `(n, obs_len)` and the
    /// encoded previous action `(n, action_dim)`.
    pub fn filter_step(
        &self,
        prev: &FilterState,
        imputed: &Tensor,
        prev_action: &Tensor,
    ) -> Result<(FilterState, LatentDistribution)> {
        let u = self.fuse(imputed, prev_action)?;
        let lstm = self.rnn()?.step(&u, &prev.lstm)?;
        let dist = self.heads(&lstm.h)?;
        Ok((
            FilterState {
                lstm,
                step: prev.step + 1,
            },
            dist,
        ))
    }

    /// Posterior for every step of padded sequences: `imputed` is
    /// `(b, t, obs_len)` and `actions` is `(b, t, action_dim)` holding the
    /// encoding of the previous action (zeros at `t = 0`). Returns `(b, t, d_z)`.
    pub fn posterior(&self, imputed: &Tensor, actions: &Tensor) -> Result<LatentDistribution> {
        let (b, t, d) = imputed.dims3()?;
        let flat = imputed.reshape((b * t, d))?;
        let dist = match self.cfg.kind {
            VaeKind::NonseqZi => self.encode_nonseq(&flat)?,
            VaeKind::SeqPoVae => {
                let a = actions.dim(2)?;
                let u = self.fuse(&flat, &actions.reshape((b * t, a))?)?;
                let u = u.reshape((b, t, ()))?;
                let rnn = self.rnn()?;
                let mut state = rnn.zero_state(b)?;
                let mut hs = Vec::with_capacity(t);
                for step in 0..t {
                    state = rnn.step(&u.narrow(1, step, 1)?.squeeze(1)?, &state)?;
                    hs.push(state.h.clone());
                }
                let h = Tensor::stack(&hs, 1)?.reshape((b * t, ()))?;
                self.heads(&h)?
            }
        };
        let dz = self.cfg.latent_dim;
        Ok(LatentDistribution {
            mean: dist.mean.reshape((b, t, dz))?,
            log_var: dist.log_var.reshape((b, t, dz))?,
        })
    }

    /// Likelihood parameters for latents `(n, d_z)`: Gaussian means
    /// `(n, obs_len)` or binary logits `(n, 2, obs_len)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let out = self.decoder.forward(z)?;
        let n = z.dim(0)?;
        Ok(match self.cfg.likelihood {
            Likelihood::Gaussian => out,
            Likelihood::Binary => out.reshape((n, 2, self.cfg.obs_len))?,
        })
    }

    /// Point prediction per entry: the Gaussian mean, or the probability
    /// that a binary entry is 1.
    pub fn predict(&self, z: &Tensor) -> Result<Tensor> {
        let out = self.decode(z)?;
        match self.cfg.likelihood {
            Likelihood::Gaussian => Ok(out),
            Likelihood::Binary => {
                let d = (out.narrow(1, 1, 1)? - out.narrow(1, 0, 1)?)?.squeeze(1)?;
                sigmoid(&d)
            }
        }
    }
}
