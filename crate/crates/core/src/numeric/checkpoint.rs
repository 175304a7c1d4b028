//! Binary parameter container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (float width, caller metadata, parameter names and shapes), then every
//! parameter's data as raw little-endian floats in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Float, FloatWidth, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"FIGLMCK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    float_width: FloatWidth,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

pub fn encode<T: Float>(store: &ParamStore<T>, meta: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        float_width: T::WIDTH,
        meta: meta.clone(),
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable: t.requires_grad,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + store.num_scalars() * T::WIDTH.bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<(ParamStore<T>, serde_json::Value)> {
    let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.float_width != T::WIDTH {
        return Err(Error::Checkpoint(format!(
            "float width mismatch: file has {:?}, expected {:?}",
            header.float_width,
            T::WIDTH
        )));
    }
    let width = T::WIDTH.bytes();
    let mut pos = 16 + hlen;
    let mut store = ParamStore::new();
    for entry in header.params {
        let numel: usize = entry.shape.iter().product();
        let end = pos + numel * width;
        let raw = bytes
            .get(pos..end)
            .ok_or_else(|| corrupt("truncated parameter data"))?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        let mut t = Tensor::new(entry.shape, data)?;
        t.requires_grad = entry.trainable;
        store.push(entry.name, t);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((store, header.meta))
}

pub fn save<T: Float>(path: &Path, store: &ParamStore<T>, meta: &serde_json::Value) -> Result<()> {
    fs::write(path, encode(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Float>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
