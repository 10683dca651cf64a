//! On-disk trajectory datasets.
//!
//! A dataset is a directory with two files:
//!
//! * `manifest.json`: counts, shapes, dtypes, environment and dynamics
//!   versions, the blob digest and per-trajectory `(offset, length)` entries.
//! * `data.bin`: all trajectories back to back. Per trajectory of length `T`
//!   with `D` raw entries and `F` acquirable features, in order:
//!   observations `T*D` f32, masks `T*D` u8, controls `T` u32,
//!   acquisitions `T*F` u8, rewards `T` f32, costs `T` f32, terminal u8.
//!   All multi-byte values are little-endian; booleans are 0 or 1.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CoreError, Result};
use crate::record::TrajectoryRecord;
use crate::types::{EnvDescriptor, FeatureMask};

pub const FORMAT: &str = "afa-dataset-v1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "data.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub env: String,
    pub env_version: String,
    pub descriptor: EnvDescriptor,
    pub unit_cost: f64,
    pub seed: u64,
    /// Hash of the configuration that produced the dataset.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryEntry {
    pub offset: u64,
    pub length: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub header: DatasetHeader,
    pub count: usize,
    pub obs_len: usize,
    pub dtypes: Dtypes,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    pub trajectories: Vec<TrajectoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dtypes {
    pub observations: String,
    pub masks: String,
    pub controls: String,
    pub acquisitions: String,
    pub rewards: String,
    pub costs: String,
    pub terminal: String,
}

impl Default for Dtypes {
    fn default() -> Self {
        let s = |v: &str| v.to_string();
        Self {
            observations: s("f32le"),
            masks: s("u8"),
            controls: s("u32le"),
            acquisitions: s("u8"),
            rewards: s("f32le"),
            costs: s("f32le"),
            terminal: s("u8"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<TrajectoryRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            r.validate(&self.header.descriptor, self.header.unit_cost, i)?;
        }
        Ok(())
    }

    /// Short content identifier recorded in downstream checkpoints.
    pub fn version(&self) -> String {
        let (blob, _) = encode_blob(&self.records);
        let digest = hex::encode(Sha256::digest(&blob));
        format!("{}:{}", self.header.env_version, &digest[..16])
    }

    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (blob, trajectories) = encode_blob(&self.records);
        let manifest = Manifest {
            format: FORMAT.to_string(),
            header: self.header.clone(),
            count: self.records.len(),
            obs_len: self.header.descriptor.obs_len(),
            dtypes: Dtypes::default(),
            blob_bytes: blob.len() as u64,
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            trajectories,
        };
        let blob_path = dir.join(BLOB);
        fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
        let manifest_path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
        Ok(manifest)
    }

    /// Reads a dataset, refusing to return anything if the blob or the
    /// manifest are inconsistent.
    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CoreError::Json {
            path: manifest_path.display().to_string(),
            source,
        })?;
        let blob_path = dir.join(BLOB);
        let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        decode(&manifest, &blob)
    }
}

fn record_bytes(len: usize, d: usize, f: usize) -> usize {
    len * d * 4 + len * d + len * 4 + len * f + len * 4 + len * 4 + 1
}

fn encode_blob(records: &[TrajectoryRecord]) -> (Vec<u8>, Vec<TrajectoryEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        entries.push(TrajectoryEntry {
            offset: blob.len() as u64,
            length: r.len(),
            source: r.source.clone(),
        });
        for obs in &r.observations {
            for v in obs {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        for mask in &r.masks {
            blob.extend(mask.iter().map(|&b| b as u8));
        }
        for c in &r.controls {
            blob.extend_from_slice(&c.to_le_bytes());
        }
        for a in &r.acquisitions {
            blob.extend(a.bits().iter().map(|&b| b as u8));
        }
        for v in &r.rewards {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        for v in &r.costs {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        blob.push(r.terminal as u8);
    }
    (blob, entries)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(n * 4)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    fn u32s(&mut self, n: usize) -> Vec<u32> {
        self.take(n * 4)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    fn bools(&mut self, n: usize, index: usize) -> Result<Vec<bool>> {
        self.take(n)
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(CoreError::Integrity(format!(
                    "trajectory {index}: boolean byte {other} is neither 0 nor 1"
                ))),
            })
            .collect()
    }
}

fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Dataset> {
    let integrity = |msg: String| Err(CoreError::Integrity(msg));
    if manifest.format != FORMAT {
        return integrity(format!("unsupported format `{}`", manifest.format));
    }
    if manifest.dtypes != Dtypes::default() {
        return integrity("unsupported dtypes in manifest".into());
    }
    let desc = &manifest.header.descriptor;
    desc.validate()?;
    let d = desc.obs_len();
    let f = desc.n_features;
    if manifest.obs_len != d {
        return integrity(format!("manifest obs_len {} disagrees with descriptor {d}", manifest.obs_len));
    }
    if manifest.count != manifest.trajectories.len() {
        return integrity(format!(
            "manifest count {} but {} trajectory entries",
            manifest.count,
            manifest.trajectories.len()
        ));
    }
    if blob.len() as u64 != manifest.blob_bytes {
        return integrity(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        ));
    }
    let mut expected_offset = 0u64;
    for (i, e) in manifest.trajectories.iter().enumerate() {
        if e.offset != expected_offset {
            return integrity(format!(
                "trajectory {i}: offset {} but previous entries end at {expected_offset}",
                e.offset
            ));
        }
        if e.length == 0 || e.length > desc.max_steps {
            return integrity(format!("trajectory {i}: invalid length {}", e.length));
        }
        expected_offset += record_bytes(e.length, d, f) as u64;
    }
    if expected_offset != blob.len() as u64 {
        let culprit = manifest
            .trajectories
            .iter()
            .enumerate()
            .find(|(_, e)| e.offset + record_bytes(e.length, d, f) as u64 > blob.len() as u64)
            .map(|(i, _)| i)
            .unwrap_or(manifest.trajectories.len().saturating_sub(1));
        return integrity(format!(
            "trajectory {culprit}: shapes imply {expected_offset} blob bytes, blob has {}",
            blob.len()
        ));
    }
    let digest = hex::encode(Sha256::digest(blob));
    if digest != manifest.blob_sha256 {
        return integrity(format!(
            "blob digest {digest} does not match manifest {}",
            manifest.blob_sha256
        ));
    }

    let mut cur = Cursor { buf: blob, pos: 0 };
    let mut records = Vec::with_capacity(manifest.count);
    for (i, e) in manifest.trajectories.iter().enumerate() {
        let t = e.length;
        let flat = cur.f32s(t * d);
        let observations = flat.chunks_exact(d).map(|c| c.to_vec()).collect();
        let flat_masks = cur.bools(t * d, i)?;
        let masks = flat_masks.chunks_exact(d).map(|c| c.to_vec()).collect();
        let controls = cur.u32s(t);
        let flat_acq = cur.bools(t * f, i)?;
        let acquisitions = flat_acq
            .chunks_exact(f)
            .map(|c| FeatureMask::new(c.to_vec()))
            .collect();
        let rewards = cur.f32s(t);
        let costs = cur.f32s(t);
        let terminal = cur.bools(1, i)?[0];
        records.push(TrajectoryRecord {
            observations,
            masks,
            controls,
            acquisitions,
            rewards,
            costs,
            terminal,
            source: e.source.clone(),
        });
    }
    let ds = Dataset {
        header: manifest.header.clone(),
        records,
    };
    ds.validate()?;
    Ok(ds)
}
