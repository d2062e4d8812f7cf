//! Checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header,
//! little-endian f32 payload in header order, then the SHA-256 of all
//! preceding bytes. Files are written to a temporary sibling and renamed,
//! so a reader never sees a partial checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"INCLGCKP";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Free-form counters and settings (iteration, optimizer steps, ...).
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig) -> Self {
        Checkpoint { model, meta: serde_json::Value::Null, tensors: BTreeMap::new() }
    }

    /// Adds every array of `store` under `prefix/`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (k, v) in store.iter() {
            self.tensors.insert(format!("{prefix}/{k}"), (**v).clone());
        }
    }

    /// Arrays stored under `prefix/`, with the prefix stripped.
    pub fn store(&self, prefix: &str) -> ParamStore<f32> {
        let p = format!("{prefix}/");
        ParamStore::from_map(
            self.tensors.iter().filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone()))).collect(),
        )
    }

    pub fn has_section(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(k, v)| Entry { name: k.clone(), shape: v.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.values().map(|t| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted file)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body.get(20..20 + hlen).ok_or_else(|| bad("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut data = &body[20 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 4 * n {
                return Err(Error::Checkpoint(format!("payload too short for {}", e.name)));
            }
            let (chunk, rest) = data.split_at(4 * n);
            data = rest;
            let vals = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.insert(e.name, Tensor::from_vec(&e.shape, vals)?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint { model: header.model, meta: header.meta, tensors })
    }

    /// Writes atomically; returns the content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))?;
        Ok(hash_hex(&bytes))
    }

    /// Loads and verifies a checkpoint; returns it with its content hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, hash_hex(&bytes)))
    }
}

/// Hex SHA-256 of a byte string.
pub fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
