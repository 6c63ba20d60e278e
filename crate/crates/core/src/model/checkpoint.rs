//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"LPTCKPT\0"
//! 8       4     u32    container version (currently 1)
//! 12      8     u64    header length H
//! 20      H     UTF-8 JSON header
//! 20+H    ...   tensor blob
//! ```
//!
//! The JSON header holds `version`, `dtype` (`"f32"` or `"f64"`), the model
//! config echo, the RNG seed, named iteration counters, a free-form `extra`
//! object and a tensor table `[{name, rows, cols, offset}]`. Offsets count
//! elements (not bytes) from the start of the blob. Parameter tensors use
//! their parameter names; other state (chain banks, optimizer moments) uses
//! prefixed names such as `chains.states` or `adam.m.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Lpt, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"LPTCKPT\0";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    /// Lossless; used for resumable mid-run checkpoints.
    F64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: Dtype,
    config: ModelConfig,
    seed: u64,
    counters: BTreeMap<String, u64>,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub counters: BTreeMap<String, u64>,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn from_model(model: &Lpt, seed: u64) -> Self {
        Checkpoint {
            config: model.config().clone(),
            seed,
            counters: BTreeMap::new(),
            extra: serde_json::Value::Null,
            tensors: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn with_counter(mut self, name: &str, value: u64) -> Self {
        self.counters.insert(name.to_string(), value);
        self
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.push((name.into(), value));
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Rebuilds the model, checking every parameter is present with the right shape.
    pub fn to_model(&self) -> Result<Lpt> {
        let mut model = Lpt::new(self.config.clone(), self.seed)?;
        for p in model.params_mut().iter_mut() {
            let m = self
                .tensor(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if m.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
            p.value = m.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, m) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                rows: m.rows,
                cols: m.cols,
                offset,
            });
            offset += m.len();
        }
        let header = Header {
            version: CONTAINER_VERSION,
            dtype,
            config: self.config.clone(),
            seed: self.seed,
            counters: self.counters.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let mut out = Vec::with_capacity(20 + json.len() + offset * width);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for &v in &m.data {
                match dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        if header.version != CONTAINER_VERSION {
            return Err(bad("header version mismatch"));
        }
        let blob = &bytes[hend..];
        let width = match header.dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            let start = e.offset * width;
            let end = start + n * width;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("tensor {} runs past the blob", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(width)
                .map(|c| match header.dtype {
                    Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            tensors.push((e.name, Mat::from_vec(e.rows, e.cols, data)));
        }
        Ok(Checkpoint {
            config: header.config,
            seed: header.seed,
            counters: header.counters,
            extra: header.extra,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        crate::seqcore::write_atomic(path.as_ref(), &self.to_bytes(dtype)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::Vocabulary;

    fn tiny() -> Lpt {
        let mut cfg = ModelConfig::desk(Vocabulary::dna(4));
        cfg.embed = 8;
        cfg.ff_hidden = 8;
        cfg.k_dim = 4;
        cfg.prior_hidden = 4;
        Lpt::new(cfg, 3).unwrap()
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let model = tiny();
        let mut ck = Checkpoint::from_model(&model, 3).with_counter("iteration", 7);
        ck.push_tensor("chains.states", Mat::from_vec(1, 2, vec![0.1, -0.2]));
        let back = Checkpoint::from_bytes(&ck.to_bytes(Dtype::F64).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), model);
    }

    #[test]
    fn f32_roundtrip_rounds() {
        let model = tiny();
        let ck = Checkpoint::from_model(&model, 3);
        let bytes = ck.to_bytes(Dtype::F32).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
        for (a, b) in back.params().iter().zip(model.params().iter()) {
            for (x, y) in a.value.data.iter().zip(&b.value.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint::from_model(&tiny(), 0).to_bytes(Dtype::F32).unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let bytes = Checkpoint::from_model(&tiny(), 0).to_bytes(Dtype::F32).unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
