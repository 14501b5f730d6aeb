//! Versioned parameter files: `LOBGCKPT`, a `u32` version, a `u64` header
//! length, a JSON header, then every tensor as little-endian `f32`.

use std::fs;
use std::path::Path;

use lobgen_core::dataset_io::{write_atomic, IoError};
use lobgen_core::tokenizer::manifest_hash;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Layout, ModelConfig, S5Model, TensorInfo, BLOCK_DESCRIPTION};

pub const MAGIC: &[u8; 8] = b"LOBGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Format(String),
    #[error("header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("vocabulary manifest {found} does not match {expected}")]
    Vocabulary { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab_manifest_hash: String,
    pub step: u64,
    pub architecture: String,
    pub tensors: Vec<TensorInfo>,
}

pub fn architecture(cfg: &ModelConfig) -> String {
    format!(
        "message: embed, {} blocks; book: s5 over {} channels, gelu, linear to {}, {} blocks; \
         sequence projection to {}, feature concat; joint: {} blocks at {}; layer_norm, mean pool, linear head; \
         block: {}",
        cfg.layers_msg,
        cfg.book_features(),
        cfg.h,
        cfg.layers_book.saturating_sub(1),
        cfg.l,
        cfg.layers_joint,
        cfg.joint_width(),
        BLOCK_DESCRIPTION
    )
}

pub fn encode(model: &S5Model<f32>, step: u64) -> Result<Vec<u8>, CheckpointError> {
    let layout = Layout::new(&model.cfg);
    let header = CheckpointHeader {
        config: model.cfg.clone(),
        vocab_manifest_hash: manifest_hash(),
        step,
        architecture: architecture(&model.cfg),
        tensors: layout.tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &model.params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(S5Model<f32>, CheckpointHeader), CheckpointError> {
    let bad = |s: &str| CheckpointError::Format(s.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
    let expected = manifest_hash();
    if header.vocab_manifest_hash != expected {
        return Err(CheckpointError::Vocabulary {
            expected,
            found: header.vocab_manifest_hash,
        });
    }
    let layout = Layout::new(&header.config);
    if layout.tensors != header.tensors {
        return Err(bad("tensor table does not match config"));
    }
    let data = &body[hlen..];
    if data.len() != 4 * layout.total {
        return Err(CheckpointError::Format(format!(
            "expected {} parameters, found {} bytes",
            layout.total,
            data.len()
        )));
    }
    let params = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((S5Model::from_params(header.config.clone(), params), header))
}

pub fn save(path: &Path, model: &S5Model<f32>, step: u64) -> Result<(), CheckpointError> {
    Ok(write_atomic(path, &encode(model, step)?)?)
}

pub fn load(path: &Path) -> Result<(S5Model<f32>, CheckpointHeader), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
