//! FCCP1 checkpoints: magic, little-endian `u64` header length, JSON header,
//! then every tensor as little-endian `f32` at the offset the header names.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctrlnet::{init_ctrlnet, CtrlConfig, CtrlParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{init_base, BaseParams, ModelConfig};
use crate::nn::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FCCP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Ctrl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    #[serde(default)]
    pub ctrl: Option<CtrlConfig>,
    /// Free-form provenance such as learning rates and step counts.
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

fn encode(
    kind: CheckpointKind,
    model: &ModelConfig,
    ctrl: Option<&CtrlConfig>,
    params: &impl ParamSet,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, values) in params.tensors("") {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
        });
        for &v in values {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        kind,
        model: model.clone(),
        ctrl: ctrl.cloned(),
        metadata,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(format!("header serialization: {e}")))?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_base(path: &Path, params: &BaseParams, metadata: BTreeMap<String, serde_json::Value>) -> Result<()> {
    let bytes = encode(CheckpointKind::Base, &params.config, None, params, metadata)?;
    write_atomic(path, &bytes)
}

pub fn save_ctrl(
    path: &Path,
    params: &CtrlParams,
    model: &ModelConfig,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let bytes = encode(CheckpointKind::Ctrl, model, Some(&params.config), params, metadata)?;
    write_atomic(path, &bytes)
}

/// Reads magic and header; returns the header and the payload bytes.
pub fn read_header(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let found = &bytes[..bytes.len().min(CHECKPOINT_MAGIC.len())];
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let bad = |reason: String| Error::BadHeader {
        path: path.to_path_buf(),
        reason,
    };
    let start = CHECKPOINT_MAGIC.len();
    let len_bytes: [u8; 8] = bytes
        .get(start..start + 8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("missing header length".into()))?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(start + 8..(start + 8).saturating_add(len))
        .ok_or_else(|| bad(format!("header length {len} exceeds file size")))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    Ok((header, start + 8 + len))
}

/// Fills `skeleton` from the payload, checking every tensor's name, shape
/// and extent against the header.
fn fill(path: &Path, header: &CheckpointHeader, payload: &[u8], skeleton: &mut impl ParamSet) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = skeleton.tensors("").into_iter().map(|(n, s, _)| (n, s)).collect();
    let index: BTreeMap<&str, &TensorEntry> = header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    if header.tensors.len() != expected.len() {
        return Err(Error::BadHeader {
            path: path.to_path_buf(),
            reason: format!("{} tensors listed, model has {}", header.tensors.len(), expected.len()),
        });
    }
    for ((name, shape), dst) in expected.iter().zip(skeleton.tensors_mut()) {
        let entry = index.get(name.as_str()).ok_or_else(|| Error::BadHeader {
            path: path.to_path_buf(),
            reason: format!("tensor `{name}` missing"),
        })?;
        if &entry.shape != shape {
            return Err(Error::ShapeMismatch {
                tensor: name.clone(),
                expected: entry.shape.clone(),
                actual: shape.clone(),
            });
        }
        let needed = dst.len() * 4;
        let src = payload
            .get(entry.offset..)
            .filter(|s| s.len() >= needed)
            .ok_or_else(|| Error::Truncated {
                path: path.to_path_buf(),
                tensor: name.clone(),
                needed,
                available: payload.len().saturating_sub(entry.offset),
            })?;
        for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn expect_kind(path: &Path, header: &CheckpointHeader, kind: CheckpointKind) -> Result<()> {
    if header.kind != kind {
        return Err(Error::BadHeader {
            path: path.to_path_buf(),
            reason: format!("expected a {kind:?} checkpoint, found {:?}", header.kind),
        });
    }
    Ok(())
}

pub fn load_base(path: &Path) -> Result<(BaseParams, CheckpointHeader)> {
    let bytes = read(path)?;
    let (header, start) = read_header(path, &bytes)?;
    expect_kind(path, &header, CheckpointKind::Base)?;
    let mut params = init_base(&header.model, 0)?;
    fill(path, &header, &bytes[start..], &mut params)?;
    Ok((params, header))
}

/// Loads a control branch; `base` must match the model it was trained against.
pub fn load_ctrl(path: &Path, base: &BaseParams) -> Result<(CtrlParams, CheckpointHeader)> {
    let bytes = read(path)?;
    let (header, start) = read_header(path, &bytes)?;
    expect_kind(path, &header, CheckpointKind::Ctrl)?;
    let cfg = header.ctrl.clone().ok_or_else(|| Error::BadHeader {
        path: path.to_path_buf(),
        reason: "control checkpoint without control configuration".into(),
    })?;
    if header.model != base.config {
        return Err(Error::BadHeader {
            path: path.to_path_buf(),
            reason: "control checkpoint was trained against a different model configuration".into(),
        });
    }
    let mut params = init_ctrlnet(base, &cfg, 0)?;
    fill(path, &header, &bytes[start..], &mut params)?;
    Ok((params, header))
}
