//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `NTFCKPT\0` |
//! | 4     | format version (`u32`) |
//! | 8     | manifest length `m` (`u64`) |
//! | m     | UTF-8 JSON [`Manifest`] |
//! | 8 · k | parameters as `f64`, in manifest order |

use std::path::Path;

use nodetf::{Model, ModelConfig, RunRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"NTFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Hex SHA-256 of the model config's JSON encoding.
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunRecord>,
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    hex::encode(Sha256::digest(&json))
}

pub fn encode(model: &Model, run: Option<&RunRecord>) -> Vec<u8> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        config_hash: config_hash(&model.config),
        tensors: model
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
        run: run.cloned(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let payload = model.params.flatten();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Failure(format!("checkpoint: {}", msg.into()))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], CliError> {
    if bytes.len() < n {
        return Err(corrupt("truncated file"));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Rebuilds the model, checking magic, version, config hash and every tensor shape.
pub fn decode(mut bytes: &[u8]) -> Result<(Model, Manifest), CliError> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| corrupt("manifest too large"))?;
    let manifest: Manifest =
        serde_json::from_slice(take(&mut bytes, len)?).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.config_hash != config_hash(&manifest.model) {
        return Err(corrupt("config hash does not match the stored config"));
    }
    let mut model = Model::seeded(manifest.model.clone(), 0).map_err(|e| corrupt(format!("stored config: {e}")))?;
    let layout: Vec<TensorEntry> = model
        .params
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        })
        .collect();
    if layout != manifest.tensors {
        return Err(corrupt("tensor layout does not match the stored config"));
    }
    if bytes.len() != 8 * model.params.num_scalars() {
        return Err(corrupt(format!(
            "payload holds {} bytes, expected {}",
            bytes.len(),
            8 * model.params.num_scalars()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.params.load_flat(&values).map_err(|e| corrupt(e.to_string()))?;
    Ok((model, manifest))
}

pub fn save(path: &Path, model: &Model, run: Option<&RunRecord>) -> Result<(), CliError> {
    std::fs::write(path, encode(model, run)).map_err(|e| CliError::Failure(format!("writing {}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<(Model, Manifest), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Failure(format!("reading {}: {e}", path.display())))?;
    decode(&bytes)
}
