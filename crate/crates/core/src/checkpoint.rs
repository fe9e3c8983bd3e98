//! Self-describing model container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `LATODECK`                          |
//! | 8      | 4    | format version, `u32` (currently 1)       |
//! | 12     | 4    | header length `n`, `u32`                  |
//! | 16     | n    | UTF-8 JSON header                         |
//! | 16+n   | 8·m  | payload: `m` IEEE-754 `f64` values        |
//!
//! The header holds the architecture record, normalization statistics,
//! free-form metadata and a tensor table (`name`, `shape`, `offset`, `len`,
//! offsets counted in `f64` elements from the start of the payload). The
//! observation noise is stored as the tensor `obs_noise`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams, NormStats};

pub const MAGIC: &[u8; 8] = b"LATODECK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub norm_stats: NormStats,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    norm_stats: NormStats,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
}

impl Checkpoint {
    pub fn new(params: ModelParams, norm_stats: NormStats) -> Self {
        Checkpoint { params, norm_stats, metadata: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let obs_noise = Tensor::vector(self.params.obs_noise.clone()).expect("finite obs noise");
        let mut named: Vec<(String, &Tensor)> = self.params.named_tensors();
        named.push(("obs_noise".to_string(), &obs_noise));

        let mut tensors = Vec::with_capacity(named.len());
        let mut offset = 0;
        for (name, t) in &named {
            tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.numel() });
            offset += t.numel();
        }
        let header = Header {
            architecture: self.params.arch.clone(),
            norm_stats: self.norm_stats.clone(),
            metadata: self.metadata.clone(),
            tensors,
            payload_len: offset,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(16 + header.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {})",
                version, FORMAT_VERSION
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(16..16 + hlen).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {}", e)))?;
        let payload = &bytes[16 + hlen..];
        if payload.len() != 8 * header.payload_len {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header declares {} values",
                payload.len(),
                header.payload_len
            )));
        }
        let values: Vec<f64> =
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

        let mut by_name = BTreeMap::new();
        for e in &header.tensors {
            let data = values
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of payload bounds", e.name)))?;
            let t = Tensor::new(e.shape.clone(), data.to_vec())
                .map_err(|err| Error::Checkpoint(format!("tensor {}: {}", e.name, err)))?;
            by_name.insert(e.name.clone(), t);
        }
        let obs_noise = by_name
            .get("obs_noise")
            .ok_or_else(|| Error::Checkpoint("missing tensor obs_noise".into()))?
            .to_vec();
        let params = ModelParams::from_named(&header.architecture, obs_noise, |n| by_name.get(n).cloned())?;
        if header.norm_stats.n_features() != params.arch.n_features {
            return Err(Error::Checkpoint("normalization statistics do not match the architecture".into()));
        }
        Ok(Checkpoint { params, norm_stats: header.norm_stats, metadata: header.metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
