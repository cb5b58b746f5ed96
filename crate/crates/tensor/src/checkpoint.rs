//! Parameter container files.
//!
//! Layout:
//!
//! ```text
//! MADE-CKPT\n
//! {"format_version":1,"kind":...,"metadata":{...},"tensors":[...],"data_bytes":N}\n
//! <N bytes: little-endian f64 values>
//! ```
//!
//! Each tensor entry records its `name`, `shape` and byte `offset` into the
//! data section. Tensors are stored in name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"MADE-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors in deterministic (lexicographic) order.
pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
    data_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    /// Free-form structured metadata, e.g. an architecture manifest.
    pub metadata: serde_json::Value,
    pub tensors: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value, tensors: ParamSet) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel() * 8;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
            data_bytes: offset,
        };
        let json = serde_json::to_string(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| TensorError::Checkpoint(msg.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing magic line"))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header"))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| TensorError::Checkpoint(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let data = &rest[nl + 1..];
        if data.len() != header.data_bytes {
            return Err(TensorError::Checkpoint(format!(
                "data section holds {} bytes, header declares {}",
                data.len(),
                header.data_bytes
            )));
        }
        let mut tensors = ParamSet::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > data.len() {
                return Err(TensorError::Checkpoint(format!("tensor {} exceeds data section", e.name)));
            }
            let values = data[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, values)?);
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
