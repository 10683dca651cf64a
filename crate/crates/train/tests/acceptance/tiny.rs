//! Random tiny models and trajectories shared by the oracle checks.

use afa_core::{EnvDescriptor, FeatureMask, TrajectoryRecord};
use afa_models::elbo::{sample_noise, supervision_masks};
use afa_models::nn::LayerSpec;
use afa_models::{ImputerConfig, Likelihood, ParamStore, SeqBatch, SupervisionMode, Vae, VaeConfig, VaeKind};
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub desc: EnvDescriptor,
    pub cfg: VaeConfig,
    pub params: ParamStore,
    pub records: Vec<TrajectoryRecord>,
    pub sups: Vec<Vec<Vec<bool>>>,
    pub mode: SupervisionMode,
    /// `(b, t, d_z)` noise as nested vectors.
    pub eps: Vec<Vec<Vec<f64>>>,
}

impl Instance {
    pub fn vae(&self) -> Vae {
        Vae::new(&self.cfg, &mut self.params.frozen()).expect("tiny VAE builds")
    }

    /// Model whose outputs carry gradients to the parameters.
    pub fn vae_trainable(&mut self) -> Vae {
        Vae::new(&self.cfg, &mut self.params.initializer(0)).expect("tiny VAE builds")
    }

    pub fn batch(&self) -> SeqBatch {
        let refs: Vec<&TrajectoryRecord> = self.records.iter().collect();
        SeqBatch::from_records(&refs, &self.sups, &self.desc, DType::F64).expect("tiny batch builds")
    }

    pub fn eps_tensor(&self) -> Tensor {
        let (b, t, dz) = (self.eps.len(), self.eps[0].len(), self.eps[0][0].len());
        let flat: Vec<f64> = self.eps.iter().flatten().flatten().copied().collect();
        Tensor::from_vec(flat, (b, t, dz), &Device::Cpu).expect("noise tensor")
    }
}

fn dense(out: usize, relu: bool) -> LayerSpec {
    LayerSpec::dense(out, relu)
}

fn descriptor(rng: &mut ChaCha8Rng) -> EnvDescriptor {
    let d = rng.random_range(1..=8usize);
    let n_features = rng.random_range(1..=d.min(4));
    let mut groups = vec![Vec::new(); n_features];
    for raw in 0..d {
        // Every group gets at least one index; the rest may stay free.
        if raw < n_features {
            groups[raw].push(raw);
        } else if rng.random_bool(0.7) {
            groups[rng.random_range(0..n_features)].push(raw);
        }
    }
    let n_controls = rng.random_range(1..=4usize);
    EnvDescriptor::new("tiny", vec![d], n_controls, 4, groups).expect("tiny descriptor")
}

/// Overwrites every parameter with values uniform in `[-scale, scale]`.
pub fn randomize(params: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, var) in params.iter() {
        let n = var.elem_count();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let t = Tensor::from_vec(v, var.dims(), &Device::Cpu)
            .and_then(|t| t.to_dtype(var.dtype()))
            .expect("parameter values");
        var.set(&t).expect("parameter update");
    }
}

/// A random instance with `T <= 4`, `d_z <= 3` and at most eight entries.
pub fn instance(rng: &mut ChaCha8Rng, mode: Option<SupervisionMode>) -> Instance {
    let desc = descriptor(rng);
    let d = desc.obs_len();
    let a = desc.n_control_actions + desc.n_features;
    let kind = if rng.random_bool(0.5) { VaeKind::SeqPoVae } else { VaeKind::NonseqZi };
    let likelihood = if rng.random_bool(0.5) { Likelihood::Gaussian } else { Likelihood::Binary };
    let dz = rng.random_range(1..=3usize);
    let width = rng.random_range(2..=4usize);
    let obs_encoder = if rng.random_bool(0.5) {
        vec![dense(width, false)]
    } else {
        vec![dense(3, true), dense(width, rng.random_bool(0.5))]
    };
    let hidden = rng.random_range(2..=4usize);
    let decoder = match likelihood {
        Likelihood::Gaussian => vec![dense(hidden, true), dense(d, false)],
        Likelihood::Binary => vec![
            dense(hidden, true),
            dense(2 * d, false),
            LayerSpec::Reshape { shape: vec![2, d] },
        ],
    };
    let seq = kind == VaeKind::SeqPoVae;
    let cfg = VaeConfig {
        kind,
        obs_len: d,
        action_dim: a,
        latent_dim: dz,
        beta: rng.random_range(0.0..2.0),
        imputer: ImputerConfig {
            fill_value: [-10.0, 0.0, 0.5][rng.random_range(0..3)],
        },
        likelihood,
        obs_encoder,
        action_encoder: if seq { vec![dense(width, false)] } else { vec![] },
        fusion: if seq { vec![dense(rng.random_range(2..=4), true)] } else { vec![] },
        rnn_hidden: if seq { rng.random_range(2..=4) } else { 0 },
        decoder,
    };
    let mut params = ParamStore::new(DType::F64);
    {
        let mut init = params.initializer(rng.random());
        Vae::new(&cfg, &mut init).expect("tiny VAE builds");
        init.finish().expect("every parameter used");
    }
    randomize(&params, rng, 0.8);

    let b = rng.random_range(1..=3usize);
    let records: Vec<TrajectoryRecord> = (0..b).map(|_| record(&desc, likelihood, rng)).collect();
    let mode = mode.unwrap_or_else(|| match rng.random_range(0..3) {
        0 => SupervisionMode::Partial,
        1 => SupervisionMode::Full,
        _ => SupervisionMode::Fraction(0.5),
    });
    let sup_seed: u64 = rng.random();
    let sups = records
        .iter()
        .enumerate()
        .map(|(i, r)| supervision_masks(r, &desc, mode, sup_seed, i).expect("supervision masks"))
        .collect();
    let t = records.iter().map(|r| r.len()).max().unwrap_or(1);
    let eps_t = sample_noise(&[b, t, dz], DType::F64, rng).expect("noise");
    let eps: Vec<Vec<Vec<f64>>> = eps_t.to_vec3().expect("noise values");
    Instance {
        desc,
        cfg,
        params,
        records,
        sups,
        mode,
        eps,
    }
}

fn record(desc: &EnvDescriptor, likelihood: Likelihood, rng: &mut ChaCha8Rng) -> TrajectoryRecord {
    let len = rng.random_range(1..=4usize);
    let d = desc.obs_len();
    let value = |rng: &mut ChaCha8Rng| match likelihood {
        Likelihood::Gaussian => rng.random_range(-1.5f32..1.5),
        Likelihood::Binary => rng.random_range(0..2) as f32,
    };
    let acquisitions: Vec<FeatureMask> = (0..len)
        .map(|_| FeatureMask::new((0..desc.n_features).map(|_| rng.random_bool(0.5)).collect()))
        .collect();
    let mut masks = vec![desc.null_mask()];
    for acq in acquisitions.iter().take(len - 1) {
        masks.push(desc.expand_mask(acq).expect("mask width"));
    }
    TrajectoryRecord {
        observations: (0..len).map(|_| (0..d).map(|_| value(rng)).collect()).collect(),
        masks,
        controls: (0..len).map(|_| rng.random_range(0..desc.n_control_actions as u32)).collect(),
        costs: acquisitions.iter().map(|a| a.count() as f32 * 0.01).collect(),
        acquisitions,
        rewards: vec![0.0; len],
        terminal: true,
        source: "tiny".into(),
    }
}
