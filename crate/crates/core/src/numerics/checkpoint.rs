//! "FCF1" tensor container.
//!
//! Layout: the magic bytes `FCF1`, a little-endian u64 manifest length, the
//! UTF-8 JSON manifest, then the raw little-endian f32 payloads. Manifest
//! offsets are relative to the first payload byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"FCF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// Named tensors in insertion order plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every tensor whose name exists in `store`; all store entries must be present.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let entry = TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            };
            if tensors.insert(name.clone(), entry).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            version: VERSION,
            tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing FCF1 magic"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                manifest.version
            )));
        }
        let payload = &bytes[12 + len..];
        let mut entries: Vec<(String, TensorEntry)> = manifest.tensors.into_iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, e) in entries {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: payload out of bounds")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
