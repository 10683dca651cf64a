//! Named parameter storage and deterministic initialisation.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};

/// Weight initialisation schemes. Matrices are stored as `(fan_in, fan_out)`
/// and convolution kernels with the input channels in the second axis, so
/// `fan_in` is derived accordingly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform,
    /// Gaussian columns rescaled so each output unit has weight norm `scale`.
    NormColumns(f64),
    /// Orthogonal matrix times `gain`.
    Orthogonal(f64),
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        0 => 1,
        1 => shape[0],
        2 => shape[0],
        // conv (out, in, k, k) / deconv (in, out, k, k): both use dim 1 * k * k
        _ => shape[1..].iter().product(),
    }
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Returns row-major values for a `rows x cols` matrix with orthonormal
/// columns (or rows, whichever is fewer), via Gram-Schmidt.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // m vectors of length n
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(m);
    while vecs.len() < m {
        let mut v = gaussian(n, rng);
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        vecs.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows >= cols { vecs[c][r] } else { vecs[r][c] };
        }
    }
    out
}

pub fn init_values(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::FanInUniform => {
            let bound = 1.0 / (fan_in(shape) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::NormColumns(scale) => {
            let (rows, cols) = matrix_dims(shape);
            let mut v = gaussian(n, rng);
            for c in 0..cols {
                let norm = (0..rows).map(|r| v[r * cols + c].powi(2)).sum::<f64>().sqrt();
                for r in 0..rows {
                    v[r * cols + c] *= scale / norm.max(1e-12);
                }
            }
            v
        }
        Init::Orthogonal(gain) => {
            let (rows, cols) = matrix_dims(shape);
            orthogonal(rows, cols, gain, rng)
        }
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

/// Supplies parameters to model constructors, either creating them or
/// looking them up.
pub trait ParamSource {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
    fn dtype(&self) -> DType;
}

/// Trainable parameters keyed by dotted name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|k| k.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let t = tensor.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// Source that creates missing parameters from `seed` and returns
    /// existing ones unchanged.
    pub fn initializer(&mut self, seed: u64) -> Initializer<'_> {
        Initializer {
            store: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
            touched: BTreeSet::new(),
        }
    }

    /// Source returning gradient-free views that share storage with the
    /// trainable variables, so they track optimizer updates.
    pub fn frozen(&self) -> Frozen<'_> {
        Frozen { store: self }
    }

    /// Parameter values as little-endian `f32` bytes per name.
    pub fn to_f32_bytes(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<u8>)>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let values: Vec<f32> = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            out.insert(name.clone(), (var.dims().to_vec(), bytes));
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and `f32` little-endian values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, (shape, bytes)) in self.to_f32_bytes()? {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((shape.len() as u64).to_le_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            h.update(&bytes);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (name, var) in &self.vars {
            out.vars
                .insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Shared-storage copy with every name prefixed by `prefix.`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
            .collect();
        Self { dtype: self.dtype, vars }
    }

    /// Entries named `prefix.*`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        let p = format!("{prefix}.");
        let vars = self
            .vars
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect();
        Self { dtype: self.dtype, vars }
    }

    /// Union of two stores; names must not collide.
    pub fn merged(&self, other: &ParamStore) -> Result<Self> {
        let mut vars = self.vars.clone();
        for (k, v) in &other.vars {
            if vars.insert(k.clone(), v.clone()).is_some() {
                return Err(ModelError::Config(format!("duplicate parameter `{k}`")));
            }
        }
        Ok(Self { dtype: self.dtype, vars })
    }

    /// Overwrites every value with the matching parameter of `other`.
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other.get(name)?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub struct Initializer<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    touched: BTreeSet<String>,
}

impl Initializer<'_> {
    /// Errors if the store holds parameters no constructor asked for.
    pub fn finish(self) -> Result<()> {
        let unused: Vec<String> = self
            .store
            .vars
            .keys()
            .filter(|k| !self.touched.contains(*k))
            .cloned()
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(ModelError::UnusedParams(unused))
        }
    }
}

impl ParamSource for Initializer<'_> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.touched.insert(name.to_string());
        if let Some(var) = self.store.vars.get(name) {
            if var.dims() != shape {
                return Err(ModelError::Shape(format!(
                    "parameter `{name}` has shape {:?}, model expects {shape:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let values = init_values(shape, init, &mut self.rng);
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn dtype(&self) -> DType {
        self.store.dtype
    }
}

pub struct Frozen<'a> {
    store: &'a ParamStore,
}

impl ParamSource for Frozen<'_> {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let var = self.store.get(name)?;
        if var.dims() != shape {
            return Err(ModelError::Shape(format!(
                "parameter `{name}` has shape {:?}, model expects {shape:?}",
                var.dims()
            )));
        }
        Ok(var.as_tensor().detach())
    }

    fn dtype(&self) -> DType {
        self.store.dtype
    }
}
