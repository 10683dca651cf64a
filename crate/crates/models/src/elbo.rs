//! Supervised evidence lower bound over partially observed sequences.

use std::f64::consts::PI;

use afa_core::seed::rng_for;
use afa_core::{EnvDescriptor, FeatureMask, TrajectoryRecord};
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoding::{action_dim, encode_action};
use crate::error::{ModelError, Result};
use crate::nn::softplus;
use crate::vae::{LatentDistribution, Likelihood, Vae};

/// Which unobserved entries contribute to the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    /// Observed entries only.
    Partial,
    /// Every entry.
    Full,
    /// Observed entries plus each acquirable feature independently with
    /// this probability.
    Fraction(f64),
}

impl SupervisionMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fraction(rho) if !(0.0..=1.0).contains(rho) => {
                Err(ModelError::Config(format!("supervision fraction {rho} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Partial => "partial".into(),
            Self::Full => "full".into(),
            Self::Fraction(r) => format!("fraction-{r}"),
        }
    }
}

/// Raw-index supervision masks for every step of `record`. Fractional
/// draws depend only on `(seed, index)`, so a dataset position always gets
/// the same targets.
pub fn supervision_masks(
    record: &TrajectoryRecord,
    desc: &EnvDescriptor,
    mode: SupervisionMode,
    seed: u64,
    index: usize,
) -> Result<Vec<Vec<bool>>> {
    mode.validate()?;
    let mut rng = rng_for(seed, "supervision", index as u64);
    let mut out = Vec::with_capacity(record.len());
    for mask in &record.masks {
        let sup = match mode {
            SupervisionMode::Partial => mask.clone(),
            SupervisionMode::Full => vec![true; mask.len()],
            SupervisionMode::Fraction(rho) => {
                let bits: Vec<bool> = (0..desc.n_features).map(|_| rng.random::<f64>() < rho).collect();
                let extra = desc.expand_mask(&FeatureMask::new(bits))?;
                mask.iter().zip(extra).map(|(&m, e)| m || e).collect()
            }
        };
        out.push(sup);
    }
    Ok(out)
}

/// Padded tensors for a batch of trajectories, all shaped `(b, t, ...)`.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub obs: Tensor,
    pub mask: Tensor,
    pub sup: Tensor,
    /// Encoding of the previous joint action; zeros at the first step.
    pub actions: Tensor,
    /// 1 for real steps, 0 for padding; shape `(b, t)`.
    pub valid: Tensor,
    pub lengths: Vec<usize>,
}

impl SeqBatch {
    pub fn from_records(
        records: &[&TrajectoryRecord],
        sups: &[Vec<Vec<bool>>],
        desc: &EnvDescriptor,
        dtype: DType,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if sups.len() != records.len() {
            return Err(ModelError::Shape("one supervision mask set per record required".into()));
        }
        let b = records.len();
        let t = records.iter().map(|r| r.len()).max().unwrap_or(0);
        if t == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let d = desc.obs_len();
        let a = action_dim(desc);
        let mut obs = vec![0f32; b * t * d];
        let mut mask = vec![0f32; b * t * d];
        let mut sup = vec![0f32; b * t * d];
        let mut act = vec![0f32; b * t * a];
        let mut valid = vec![0f32; b * t];
        for (i, (r, s)) in records.iter().zip(sups).enumerate() {
            if s.len() != r.len() {
                return Err(ModelError::Shape(format!("record {i}: supervision length differs")));
            }
            for step in 0..r.len() {
                let base = (i * t + step) * d;
                if r.observations[step].len() != d || r.masks[step].len() != d || s[step].len() != d {
                    return Err(ModelError::Shape(format!("record {i} step {step}: width differs from {d}")));
                }
                obs[base..base + d].copy_from_slice(&r.observations[step]);
                for k in 0..d {
                    mask[base + k] = r.masks[step][k] as u8 as f32;
                    sup[base + k] = s[step][k] as u8 as f32;
                }
                if step > 0 {
                    let enc = encode_action(desc, r.controls[step - 1] as usize, &r.acquisitions[step - 1])?;
                    let ab = (i * t + step) * a;
                    act[ab..ab + a].copy_from_slice(&enc);
                }
                valid[i * t + step] = 1.0;
            }
        }
        let dev = Device::Cpu;
        let mk = |v: Vec<f32>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, &dev)?.to_dtype(dtype)?)
        };
        Ok(Self {
            obs: mk(obs, &[b, t, d])?,
            mask: mk(mask, &[b, t, d])?,
            sup: mk(sup, &[b, t, d])?,
            actions: mk(act, &[b, t, a])?,
            valid: mk(valid, &[b, t])?,
            lengths: records.iter().map(|r| r.len()).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.valid.dims()[1]
    }

    /// Copy with different observation values (same masks and actions).
    pub fn with_obs(&self, obs: Tensor) -> Self {
        Self { obs, ..self.clone() }
    }
}

/// Standard normal noise for the reparameterised sample.
pub fn sample_noise<R: Rng>(shape: &[usize], dtype: DType, rng: &mut R) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Negative log-likelihood of every entry of `target` `(n, obs_len)` under
/// decoder output `out`.
pub fn entry_nll(likelihood: Likelihood, out: &Tensor, target: &Tensor) -> Result<Tensor> {
    match likelihood {
        Likelihood::Gaussian => {
            let half_log_2pi = 0.5 * (2.0 * PI).ln();
            Ok(((out - target)?.sqr()?.affine(0.5, half_log_2pi))?)
        }
        Likelihood::Binary => {
            // -log softmax at the target class = softplus((1 - 2x) * (l1 - l0))
            let d = (out.narrow(1, 1, 1)? - out.narrow(1, 0, 1)?)?.squeeze(1)?;
            let sign = target.affine(-2.0, 1.0)?;
            softplus(&(d * sign)?)
        }
    }
}

/// Scalar summaries of one evaluation of the bound, each summed over time
/// and features and averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboDiagnostics {
    pub loss: f64,
    pub recon_obs: f64,
    pub recon_unobs: f64,
    /// Reconstruction over every valid entry regardless of masks.
    pub recon_total: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct ElboOutput {
    /// Negative ELBO; differentiable.
    pub loss: Tensor,
    pub diagnostics: ElboDiagnostics,
    pub posterior: LatentDistribution,
}

/// Negative supervised ELBO with a single reparameterised sample drawn from
/// `eps` `(b, t, d_z)`.
pub fn elbo(vae: &Vae, batch: &SeqBatch, eps: &Tensor) -> Result<ElboOutput> {
    let cfg = vae.config();
    let (b, t) = (batch.batch_size(), batch.steps());
    if b == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let d = cfg.obs_len;
    let dz = cfg.latent_dim;
    if eps.dims() != [b, t, dz] {
        return Err(ModelError::Shape(format!("noise has shape {:?}, expected {:?}", eps.dims(), [b, t, dz])));
    }
    let imputed = vae.impute(&batch.obs, &batch.mask)?;
    let q = vae.posterior(&imputed, &batch.actions)?;
    let z = q.sample(eps)?.reshape((b * t, dz))?;
    let out = vae.decode(&z)?;
    let nll = entry_nll(cfg.likelihood, &out, &batch.obs.reshape((b * t, d))?)?.reshape((b, t, d))?;

    let valid = batch.valid.unsqueeze(2)?;
    let w_obs = batch.mask.broadcast_mul(&valid)?;
    let w_unobs = batch.mask.affine(-1.0, 1.0)?.mul(&batch.sup)?.broadcast_mul(&valid)?;
    let inv_b = 1.0 / b as f64;
    let recon_obs = (nll.mul(&w_obs)?.sum_all()? * inv_b)?;
    let recon_unobs = (nll.mul(&w_unobs)?.sum_all()? * inv_b)?;
    let recon_total = (nll.broadcast_mul(&valid)?.sum_all()? * inv_b)?;
    let kl = (q.kl_elements()?.broadcast_mul(&valid)?.sum_all()? * inv_b)?;
    let loss = ((&recon_obs + &recon_unobs)? + (&kl * cfg.beta)?)?;

    let scalar = |x: &Tensor| -> Result<f64> { Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let diagnostics = ElboDiagnostics {
        loss: scalar(&loss)?,
        recon_obs: scalar(&recon_obs)?,
        recon_unobs: scalar(&recon_unobs)?,
        recon_total: scalar(&recon_total)?,
        kl: scalar(&kl)?,
    };
    Ok(ElboOutput {
        loss,
        diagnostics,
        posterior: q,
    })
}
