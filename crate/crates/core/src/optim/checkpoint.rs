//! Checkpoint container: magic, little-endian u64 manifest length, JSON
//! manifest, then the tensor blobs back to back as little-endian f32.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSet;
use crate::net::{Mat, Model, ModelConfig, NetError, TensorRole};
use crate::sigproc::Normalization;
use crate::textcodec::{vocab_matches, vocab_table, TokenId};

pub const MAGIC: &[u8; 8] = b"VDCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("checkpoint truncated: need {needed} bytes, file has {got}")]
    TruncatedFile { needed: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset from the start of the blob region.
    pub offset: usize,
    pub dtype: String,
}

/// Everything besides weights that inference needs to reproduce training-time behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub labels: LabelSet,
    pub normalization: Normalization,
    /// Training stages applied so far, in order.
    #[serde(default)]
    pub stages: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_config: ModelConfig,
    vocab: BTreeMap<String, TokenId>,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
}

pub fn write_checkpoint(model: &Model<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let tensors = model.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, _, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows, t.cols],
            offset: blob.len(),
            dtype: DTYPE.to_string(),
        });
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: model.cfg.clone(),
        vocab: vocab_table(),
        meta: meta.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let n = MAGIC.len();
    if bytes.len() < n {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::TruncatedFile {
                needed: n,
                got: bytes.len(),
            }
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..n] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let truncated = |needed: usize| CheckpointError::TruncatedFile {
        needed,
        got: bytes.len(),
    };
    let len_bytes: [u8; 8] = bytes
        .get(n..n + 8)
        .ok_or_else(|| truncated(n + 8))?
        .try_into()
        .expect("slice of 8");
    let json_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| CheckpointError::Malformed("manifest length overflows".into()))?;
    let body = n + 8;
    let blob_start = body.checked_add(json_len).ok_or_else(|| truncated(usize::MAX))?;
    let json = bytes.get(body..blob_start).ok_or_else(|| truncated(blob_start))?;

    // check the version before the full schema so future layouts report cleanly
    let raw: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Malformed("missing format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if !vocab_matches(&manifest.vocab) {
        return Err(CheckpointError::Malformed("vocabulary differs from this tokenizer".into()));
    }
    let blob = &bytes[blob_start..];

    let mut stored: HashMap<&str, Mat<f32>> = HashMap::new();
    for e in &manifest.tensors {
        if e.dtype != DTYPE {
            return Err(CheckpointError::Malformed(format!("{}: dtype {}", e.name, e.dtype)));
        }
        let count = e.shape[0]
            .checked_mul(e.shape[1])
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("{}: shape overflows", e.name)))?;
        let end = e.offset.checked_add(count).ok_or_else(|| truncated(usize::MAX))?;
        let raw = blob.get(e.offset..end).ok_or_else(|| truncated(blob_start + end))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        stored.insert(e.name.as_str(), Mat::from_vec(e.shape[0], e.shape[1], data));
    }

    let mut model = Model::<f32>::new(&manifest.model_config)?;
    let mut missing_adapters = Vec::new();
    for (name, role, t) in model.tensors_mut() {
        match stored.remove(name.as_str()) {
            Some(m) if m.shape() == t.shape() => *t = m,
            Some(m) => {
                return Err(CheckpointError::Malformed(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    m.shape(),
                    t.shape()
                )))
            }
            None if role == TensorRole::Base => {
                return Err(CheckpointError::Malformed(format!("missing tensor {name}")))
            }
            None => missing_adapters.push(name),
        }
    }
    if let Some(extra) = stored.keys().next() {
        return Err(CheckpointError::Malformed(format!("unexpected tensor {extra}")));
    }
    for l in model.linears_mut() {
        let a = format!("{}.lora_a", l.name);
        let b = format!("{}.lora_b", l.name);
        match (missing_adapters.contains(&a), missing_adapters.contains(&b)) {
            (false, false) => {}
            (true, true) => l.lora = None,
            _ => {
                return Err(CheckpointError::Malformed(format!(
                    "{}: only one adapter matrix stored",
                    l.name
                )))
            }
        }
    }
    Ok(Checkpoint {
        model,
        meta: manifest.meta,
    })
}

pub fn save_checkpoint(
    model: &Model<f32>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, write_checkpoint(model, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(&std::fs::read(path)?)
}
