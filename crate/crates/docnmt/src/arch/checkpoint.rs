//! Self-describing checkpoint container.
//!
//! Layout, version 1:
//!
//! ```text
//! bytes 0..8    magic "DNMTCKPT"
//! bytes 8..12   header length `n` (u32, little-endian)
//! bytes 12..12+n  header, UTF-8 JSON (see `Header`)
//! remainder     tensor payload, f64 little-endian, concatenated
//! ```
//!
//! The header's tensor directory names every buffer with a stable dotted
//! path and its offset into the payload, counted in f64 elements. Optimizer
//! moment buffers ride along as `adam.m.<param>` / `adam.v.<param>` entries
//! and share one step counter. Save → load → save reproduces the file byte
//! for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ContextMode;
use crate::tensor::AdamSlot;

use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"DNMTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint truncated or size inconsistent")]
    Truncated,
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint tensor {0} does not belong to the declared architecture")]
    UnknownTensor(String),
    #[error("invalid optimizer state: {0}")]
    BadOptimizerState(String),
    #[error("invalid model config in checkpoint: {0}")]
    BadConfig(String),
}

/// Everything needed to resume training or decode: config, data-side
/// context mode, the master seed, parameters, and optional Adam state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub context_mode: ContextMode,
    pub seed: u64,
    pub params: ModelParams,
    pub optimizer: Option<BTreeMap<String, AdamSlot>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    context_mode: ContextMode,
    seed: u64,
    adam_step: Option<u64>,
    tensors: Vec<DirEntry>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload in f64 elements.
    offset: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let named = self.params.named_tensors();

        let adam_step = match &self.optimizer {
            None => None,
            Some(slots) => {
                let mut step = None;
                for (name, tensor) in &named {
                    let slot = slots.get(name).ok_or_else(|| {
                        CheckpointError::BadOptimizerState(format!("no slot for {name}"))
                    })?;
                    if slot.m.len() != tensor.len() || slot.v.len() != tensor.len() {
                        return Err(CheckpointError::BadOptimizerState(format!(
                            "slot {name} sized {} for a tensor of {}",
                            slot.m.len(),
                            tensor.len()
                        )));
                    }
                    match step {
                        None => step = Some(slot.step),
                        Some(s) if s != slot.step => {
                            return Err(CheckpointError::BadOptimizerState(
                                "slots disagree on the step count".into(),
                            ))
                        }
                        _ => {}
                    }
                }
                if slots.len() != named.len() {
                    return Err(CheckpointError::BadOptimizerState(format!(
                        "{} slots for {} parameters",
                        slots.len(),
                        named.len()
                    )));
                }
                Some(step.unwrap_or(0))
            }
        };

        let mut dir = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        for (name, tensor) in &named {
            dir.push(DirEntry {
                name: name.clone(),
                shape: tensor.shape.clone(),
                offset: payload.len(),
            });
            payload.extend_from_slice(&tensor.data);
        }
        if let Some(slots) = &self.optimizer {
            for (name, tensor) in &named {
                let slot = &slots[name];
                dir.push(DirEntry {
                    name: format!("adam.m.{name}"),
                    shape: vec![tensor.len()],
                    offset: payload.len(),
                });
                payload.extend_from_slice(&slot.m);
                dir.push(DirEntry {
                    name: format!("adam.v.{name}"),
                    shape: vec![tensor.len()],
                    offset: payload.len(),
                });
                payload.extend_from_slice(&slot.v);
            }
        }

        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            context_mode: self.context_mode,
            seed: self.seed,
            adam_step,
            tensors: dir,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut out = Vec::with_capacity(12 + header_json.len() + payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for x in &payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = 12 + header_len;
        if bytes.len() < payload_start {
            return Err(CheckpointError::Truncated);
        }
        let header: Header = serde_json::from_slice(&bytes[12..payload_start])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(header.version));
        }
        let payload = &bytes[payload_start..];
        if payload.len() % 8 != 0 {
            return Err(CheckpointError::Truncated);
        }
        let total_elems = payload.len() / 8;
        let read = |offset: usize, len: usize| -> Result<Vec<f64>, CheckpointError> {
            let end = offset.checked_add(len).ok_or(CheckpointError::Truncated)?;
            if end > total_elems {
                return Err(CheckpointError::Truncated);
            }
            Ok(payload[offset * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };

        let dir: BTreeMap<&str, &DirEntry> = header
            .tensors
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();

        header
            .config
            .validate()
            .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
        let mut params = ModelParams::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
        let mut used = std::collections::BTreeSet::new();
        for (name, tensor) in params.named_tensors_mut() {
            let entry = dir
                .get(name.as_str())
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if entry.shape != tensor.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: tensor.shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            tensor.data = read(entry.offset, tensor.len())?;
            used.insert(name);
        }
        for entry in &header.tensors {
            if !entry.name.starts_with("adam.") && !used.contains(&entry.name) {
                return Err(CheckpointError::UnknownTensor(entry.name.clone()));
            }
        }

        let optimizer = match header.adam_step {
            None => None,
            Some(step) => {
                let mut slots = BTreeMap::new();
                for (name, tensor) in params.named_tensors() {
                    let m = dir
                        .get(format!("adam.m.{name}").as_str())
                        .ok_or_else(|| CheckpointError::MissingTensor(format!("adam.m.{name}")))?;
                    let v = dir
                        .get(format!("adam.v.{name}").as_str())
                        .ok_or_else(|| CheckpointError::MissingTensor(format!("adam.v.{name}")))?;
                    if m.shape != vec![tensor.len()] || v.shape != vec![tensor.len()] {
                        return Err(CheckpointError::BadOptimizerState(format!(
                            "moment shapes for {name} do not match the parameter"
                        )));
                    }
                    slots.insert(
                        name,
                        AdamSlot {
                            m: read(m.offset, tensor.len())?,
                            v: read(v.offset, tensor.len())?,
                            step,
                        },
                    );
                }
                Some(slots)
            }
        };

        Ok(Checkpoint {
            config: header.config,
            context_mode: header.context_mode,
            seed: header.seed,
            params,
            optimizer,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    Ok(fs::write(path, ckpt.to_bytes()?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
