//! Single-file checkpoints: magic, JSON header, little-endian `f32` tensors.

use std::path::Path;

use mdr_core::{ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{read, write, Error, Result};
use crate::hash::sha256_hex;

const MAGIC: &[u8; 8] = b"MDRCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    decay: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<M> {
    pub kind: String,
    pub meta: M,
    pub params: ParamStore<f32>,
    /// Digest of the file bytes.
    pub sha256: String,
}

pub fn encode<M: Serialize>(kind: &str, meta: &M, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        meta: serde_json::to_value(meta)?,
        tensors: params
            .entries()
            .iter()
            .map(|e| TensorEntry { name: e.name.clone(), shape: e.value.shape().to_vec(), decay: e.decay })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in params.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8], expect_kind: &str) -> Result<Checkpoint<M>> {
    let bad = |msg: &str| Error::Core(mdr_core::Error::Checkpoint(msg.to_string()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + n).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.kind != expect_kind {
        return Err(bad(&format!("expected a {expect_kind} checkpoint, found {}", header.kind)));
    }
    let mut params = ParamStore::new();
    let mut off = 16 + n;
    for t in &header.tensors {
        let len: usize = t.shape.iter().product();
        let raw = bytes.get(off..off + 4 * len).ok_or_else(|| bad(&format!("truncated tensor {}", t.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.add(t.name.clone(), Tensor::from_vec(&t.shape, data), t.decay);
        off += 4 * len;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    Ok(Checkpoint { kind: header.kind, meta: serde_json::from_value(header.meta)?, params, sha256: sha256_hex(bytes) })
}

/// Writes a checkpoint and returns its digest.
pub fn save<M: Serialize>(path: &Path, kind: &str, meta: &M, params: &ParamStore<f32>) -> Result<String> {
    let bytes = encode(kind, meta, params)?;
    write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<Checkpoint<M>> {
    decode(&read(path)?, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("a.w", Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, 7.25]), true);
        ps.add("a.b", Tensor::from_vec(&[3], vec![0.5, 0.25, -0.125]), false);
        let meta = serde_json::json!({"seed": 3});
        let bytes = encode("unit", &meta, &ps).unwrap();
        let ck: Checkpoint<serde_json::Value> = decode(&bytes, "unit").unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.params.fingerprint(), ps.fingerprint());
        assert!(decode::<serde_json::Value>(&bytes, "other").is_err());
        assert!(decode::<serde_json::Value>(&bytes[..bytes.len() - 1], "unit").is_err());
    }
}
