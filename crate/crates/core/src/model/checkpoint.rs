//! Checkpoint file: `CTCK` magic, little-endian u64 header length, a JSON
//! header listing each tensor's name, shape and byte offset, then the raw
//! little-endian f32 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CTCK";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn save_checkpoint(params: &Parameters, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.numel() * 4);
    for id in params.ids() {
        let value = params.value(id);
        tensors.push(Entry {
            name: params.name(id).to_string(),
            shape: value.shape().to_vec(),
            offset: payload.len(),
        });
        for v in value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION,
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Overwrites every leaf of `params` from the file; names and shapes must match.
pub fn load_checkpoint(params: &mut Parameters, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let payload = &bytes[12 + hlen..];
    if header.tensors.len() != params.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            params.len()
        )));
    }
    for entry in header.tensors {
        let id = params
            .id(&entry.name)
            .ok_or_else(|| bad(format!("unknown tensor `{}`", entry.name)))?;
        if params.value(id).shape() != entry.shape.as_slice() {
            return Err(bad(format!("shape mismatch for `{}`", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let raw = payload
            .get(entry.offset..entry.offset + n * 4)
            .ok_or_else(|| bad(format!("truncated data for `{}`", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *params.value_mut(id) = Tensor::new(entry.shape, data)?;
    }
    Ok(())
}
