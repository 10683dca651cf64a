//! Named-tensor checkpoints.
//!
//! A checkpoint is a safetensors file: every parameter is stored under its
//! dotted name as little-endian `f32`, and the header metadata holds a
//! single key `afa` whose value is the JSON-encoded [`CheckpointMeta`].
//! Loading recomputes the parameter digest and rejects mismatches.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::ParamStore;

pub const FORMAT: &str = "afa-checkpoint-v1";
const META_KEY: &str = "afa";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Vae,
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub kind: CheckpointKind,
    /// Architecture (`VaeConfig` or `PolicyConfig`).
    pub model: serde_json::Value,
    /// Resolved experiment configuration that produced the parameters.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub env_version: String,
    pub dataset_version: Option<String>,
    /// Extra entries such as the VAE a policy was trained on.
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
    pub params_sha256: String,
}

impl CheckpointMeta {
    pub fn new(
        kind: CheckpointKind,
        model: serde_json::Value,
        config: serde_json::Value,
        config_hash: impl Into<String>,
        env_version: impl Into<String>,
        dataset_version: Option<String>,
    ) -> Self {
        Self {
            format: FORMAT.to_string(),
            kind,
            model,
            config,
            config_hash: config_hash.into(),
            env_version: env_version.into(),
            dataset_version,
            extra: Default::default(),
            params_sha256: String::new(),
        }
    }

    pub fn require_env_version(&self, expected: &str) -> Result<()> {
        if self.env_version != expected {
            return Err(ModelError::VersionMismatch {
                what: "environment version".into(),
                expected: expected.into(),
                found: self.env_version.clone(),
            });
        }
        Ok(())
    }

    pub fn require_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(ModelError::VersionMismatch {
                what: "checkpoint kind".into(),
                expected: format!("{kind:?}"),
                found: format!("{:?}", self.kind),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `params` with `meta`; the digest field is filled in here.
/// Returns the stored metadata.
pub fn save(path: &Path, params: &ParamStore, mut meta: CheckpointMeta) -> Result<CheckpointMeta> {
    meta.params_sha256 = params.digest()?;
    let data = params.to_f32_bytes()?;
    let views: Vec<(String, TensorView<'_>)> = data
        .iter()
        .map(|(name, (shape, bytes))| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| ckpt_err(path, e.to_string()))
        })
        .collect::<Result<_>>()?;
    let json = serde_json::to_string(&meta).map_err(|e| ckpt_err(path, e.to_string()))?;
    let info = HashMap::from([(META_KEY.to_string(), json)]);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| ckpt_err(path, e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| ModelError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(meta)
}

/// Reads a checkpoint into `F32` parameters and verifies its digest.
pub fn load(path: &Path) -> Result<Checkpoint> {
    load_as(path, DType::F32)
}

pub fn load_as(path: &Path, dtype: DType) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| ckpt_err(path, format!("bad metadata: {e}")))?;
    if meta.format != FORMAT {
        return Err(ckpt_err(path, format!("unknown format `{}`", meta.format)));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut params = ParamStore::new(dtype);
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(ckpt_err(path, format!("tensor `{name}` is not f32")));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
        params.insert(&name, &t)?;
    }
    let digest = params.digest()?;
    if digest != meta.params_sha256 {
        return Err(ModelError::VersionMismatch {
            what: format!("parameter digest of {}", path.display()),
            expected: meta.params_sha256.clone(),
            found: digest,
        });
    }
    Ok(Checkpoint { meta, params })
}
