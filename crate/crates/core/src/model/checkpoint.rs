//! `BEYE` checkpoint files.
//!
//! Layout: magic `BEYE`, u32 LE format version, u32 LE header length, JSON hyperparameter header,
//! then every trainable tensor as little-endian `f32` in [`Trainable::tensors`] order. The
//! position matrix is never stored; it is rebuilt on load.

use std::path::Path;

use thiserror::Error;

use super::{param_count, HyperParams, ModelError, ModelParams, Trainable};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BEYE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let header = serde_json::to_vec(params.hyper()).expect("hyperparameters serialize");
    let mut out = Vec::with_capacity(12 + header.len() + params.weights.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.weights.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let corrupt = |m: &str| CheckpointError::CorruptPayload(m.to_string());
    let word = |at: usize| -> Result<u32, CheckpointError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| corrupt("truncated preamble"))
    };
    let version = word(4)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = word(8)? as usize;
    let header = bytes
        .get(12..12usize.saturating_add(header_len))
        .ok_or_else(|| corrupt("truncated header"))?;
    let hyper: HyperParams = serde_json::from_slice(header)
        .map_err(|e| CheckpointError::CorruptPayload(format!("header: {e}")))?;
    hyper.validate()?;
    let payload = &bytes[12 + header_len..];
    let expected = param_count(&hyper) * 4;
    if payload.len() != expected {
        return Err(CheckpointError::CorruptPayload(format!(
            "payload of {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut weights = Trainable::<f32>::zeros(&hyper);
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for t in weights.tensors_mut() {
        for (slot, v) in t.iter_mut().zip(&mut values) {
            *slot = v;
        }
    }
    if !weights.is_finite() {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(ModelParams::from_trainable(hyper, weights)?)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
