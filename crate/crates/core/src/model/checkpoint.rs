//! Checkpoint format "MFCK": magic, format version, JSON header (model
//! config + vocabulary hash), parameter count, little-endian f64 parameters,
//! and a SHA-256 trailer over everything before it. Loading verifies the
//! trailer, the parameter count, and that the vocabulary still matches.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tokenize::vocab::vocab_sha256;

const MAGIC: &[u8; 4] = b"MFCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_sha256: String,
}

fn bad(what: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(what.into())
}

pub(crate) fn to_bytes(params: &ModelParams, vocab_hash: &str) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        vocab_sha256: vocab_hash.to_string(),
    })
    .expect("config serializes");
    let flat = params.flat();
    let mut out = Vec::with_capacity(4 + 4 + 8 + header.len() + 8 + flat.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in &flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    if bytes.len() < 4 + 4 + 8 + 8 + 32 {
        return Err(bad("file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(bad("checksum mismatch: file corrupted"));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        let end = *pos + n;
        if end > body.len() {
            return Err(bad("truncated header"));
        }
        let s = &body[*pos..end];
        *pos = end;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(bad("not a model checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut pos, header_len)?)
        .map_err(|e| bad(format!("bad header: {e}")))?;
    if header.vocab_sha256 != vocab_sha256() {
        return Err(bad("vocabulary hash mismatch: checkpoint from a different vocabulary"));
    }
    header.config.validate()?;
    let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut params = ModelParams::init(header.config, 0)?;
    if n != params.n_params() {
        return Err(bad(format!(
            "parameter count {n} does not match configuration ({})",
            params.n_params()
        )));
    }
    if body.len() - pos != n * 8 {
        return Err(bad("parameter payload has wrong size"));
    }
    let mut flat = Vec::with_capacity(n);
    for chunk in body[pos..].chunks_exact(8) {
        flat.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter in checkpoint"));
    }
    params.set_flat(&flat);
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(params, &vocab_sha256()))
        .map_err(|e| bad(format!("write {}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes =
        std::fs::read(path).map_err(|e| bad(format!("read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
