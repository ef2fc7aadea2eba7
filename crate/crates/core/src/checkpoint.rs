//! Checkpoint files.
//!
//! Layout: magic `3MCK`, a u64 little-endian header length, a UTF-8 JSON
//! header, then every parameter as contiguous little-endian f64 values at
//! the byte offsets (relative to the end of the header) listed in the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::decoder::MultiLevelSet;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"3MCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    /// Free-form metadata (step, epoch, eval loss).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    /// Snapshot of every parameter in `store` accepted by `keep`.
    pub fn capture(cfg: &ModelConfig, store: &ParamStore, meta: serde_json::Value, keep: impl Fn(&str) -> bool) -> Self {
        let mut params = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for id in store.ids() {
            let spec = store.spec(id);
            if !keep(&spec.name) {
                continue;
            }
            params.push(ParamEntry {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                offset,
            });
            offset += 8 * spec.numel() as u64;
            tensors.push(store.get(id).clone());
        }
        Checkpoint {
            header: Header {
                config: cfg.clone(),
                meta,
                params,
            },
            tensors,
        }
    }

    pub fn full(cfg: &ModelConfig, store: &ParamStore, meta: serde_json::Value) -> Self {
        Self::capture(cfg, store, meta, |_| true)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.header.params.iter().position(|p| p.name == name).map(|i| &self.tensors[i])
    }

    /// Drops the train-only auxiliary decoders; the config keeps only the
    /// main decoder level.
    pub fn strip_auxiliary(&self) -> Self {
        let prefix = format!("{}.", MultiLevelSet::AUX_PREFIX);
        let mut params = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (p, t) in self.header.params.iter().zip(&self.tensors) {
            if p.name.starts_with(&prefix) {
                continue;
            }
            params.push(ParamEntry { offset, ..p.clone() });
            offset += 8 * t.len() as u64;
            tensors.push(t.clone());
        }
        Checkpoint {
            header: Header {
                config: ModelConfig {
                    levels: 1,
                    ..self.header.config.clone()
                },
                params,
                meta: self.header.meta.clone(),
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let body: usize = self.tensors.iter().map(|t| 8 * t.len()).sum();
        let mut out = Vec::with_capacity(12 + header.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing 3MCK magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body_start = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..body_start])?;
        let body = &bytes[body_start..];
        let mut tensors = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let start = p.offset as usize;
            let end = start + 8 * n;
            if end > body.len() {
                return Err(Error::Format(format!("parameter {} extends past end of file", p.name)));
            }
            let data = body[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(p.shape.clone(), data)?);
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every stored tensor into the parameter of the same name.
    /// Parameters of `store` absent from the checkpoint are left untouched
    /// and returned; a stored name unknown to `store` is an error.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<Vec<String>> {
        let mut seen = vec![false; store.len()];
        for (p, t) in self.header.params.iter().zip(&self.tensors) {
            let id = store
                .id(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {} not in model", p.name)))?;
            store.set(id, t.clone())?;
            seen[id.index()] = true;
        }
        Ok(store
            .ids()
            .filter(|id| !seen[id.index()])
            .map(|id| store.name(id).to_string())
            .collect())
    }
}
