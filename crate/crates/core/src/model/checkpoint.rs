//! Checkpoint container.
//!
//! Layout: the 8-byte magic `LSLOCKPT`, a little-endian `u64` header
//! length, the JSON header, then every tensor's values as little-endian
//! `f64` in manifest order. Manifest offsets count bytes from the start of
//! the payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LSLOCKPT";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model_config: ModelConfig) -> Self {
        Self { model_config, tensors: Vec::new(), metadata: BTreeMap::new() }
    }

    /// Snapshot of the named parameters, in the order given.
    pub fn from_store(model_config: ModelConfig, store: &ParamStore, ids: &[ParamId]) -> Self {
        let tensors = ids.iter().map(|&id| (store.name(id).to_string(), store.get(id).clone())).collect();
        Self { model_config, tensors, metadata: BTreeMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every store parameter whose name appears in the checkpoint.
    /// Returns how many were loaded.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in &self.tensors {
            if let Some(id) = store.id(name) {
                store.set(id, t.clone())?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: self.model_config.clone(),
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(8 * t.len());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.format_version)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the end of the payload", e.name)))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self { model_config: header.model_config, tensors, metadata: header.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use proptest::prelude::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let config = ModelConfig { num_layers: 1, d_model: 4, num_heads: 2, d_ffn: 6, vocab_size: 9, max_len: 5 };
        let mut store = ParamStore::new();
        let model = build_model(&config, 3, &mut store).unwrap();
        let ck = Checkpoint::from_store(config.clone(), &store, model.param_ids());
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.model_config, config);
        assert_eq!(back.to_bytes(), bytes);

        let mut fresh = ParamStore::new();
        build_model(&config, 99, &mut fresh).unwrap();
        assert_eq!(back.load_into(&mut fresh).unwrap(), store.len());
        for id in store.ids() {
            assert!(store.get(id).bitwise_eq(fresh.get(id)));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::read_from(&mut &b"NOTACKPT\0\0\0\0\0\0\0\0"[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_values_survive(values in prop::collection::vec(any::<f64>(), 1..40)) {
            let mut ck = Checkpoint::new(ModelConfig::default());
            ck.push("x", Tensor::vector(values.clone()));
            let back = Checkpoint::read_from(&mut ck.to_bytes().as_slice()).unwrap();
            let got = back.get("x").unwrap().data();
            prop_assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
