//! Checkpoint container.
//!
//! Layout: the 8 magic bytes `STRKRIG\0`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor's entries as little-endian `f64` in
//! header order. The header is
//! `{"format", "version", "kind", "config", "meta", "tensors": [{"name", "rows", "cols"}]}`
//! with keys sorted, so equal contents always produce equal bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::error::ModelError;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"STRKRIG\0";
pub const FORMAT: &str = "strokerig-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    config: Value,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry { name: name.to_string(), rows: t.rows, cols: t.cols })
                .collect(),
        };
        // Round-trip through Value so object keys come out sorted.
        let header = serde_json::to_vec(&serde_json::to_value(&header).expect("header serializes")).expect("json");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(bad(format!("unknown format {:?}", header.format)));
        }
        if header.version != VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let mut data = &bytes[16 + hlen..];
        let mut params = ParamSet::new();
        for e in header.tensors {
            let n = e.rows * e.cols;
            if data.len() < 8 * n {
                return Err(bad(format!("truncated data for {}", e.name)));
            }
            let vals = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            data = &data[8 * n..];
            params.add(e.name, Tensor::from_vec(e.rows, e.cols, vals));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { kind: header.kind, config: header.config, meta: header.meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ModelError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(bad(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }
}
