//! Named-tensor storage and its single-file container format.
//!
//! Layout: `u64` little-endian header length, then a JSON index
//! `{name: {dtype, shape, offset, length}}`, then the concatenated
//! row-major little-endian payload. Offsets are relative to the payload start.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dtype(&self, name: &str) -> Result<Dtype> {
        self.get(name).map(|_| Dtype::F32)
    }

    /// SHA-256 over the serialized container; equal digests mean bit-identical stores.
    pub fn digest(&self) -> String {
        let bytes = self.to_bytes();
        let hash = Sha256::digest(&bytes);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut index = BTreeMap::new();
        let mut offset = 0;
        for (name, tensor) in &self.entries {
            let length = tensor.len() * Dtype::F32.size();
            index.insert(
                name.clone(),
                IndexEntry {
                    dtype: Dtype::F32,
                    shape: tensor.shape().to_vec(),
                    offset,
                    length,
                },
            );
            offset += length;
        }
        let header = serde_json::to_vec(&index).expect("index serializes");
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for tensor in self.entries.values() {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        if bytes.len() < 8 {
            return Err(corrupt("file shorter than header length prefix"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let index: BTreeMap<String, IndexEntry> = serde_json::from_slice(&bytes[8..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut entries = BTreeMap::new();
        for (name, entry) in index {
            let numel: usize = entry.shape.iter().product();
            if entry.length != numel * entry.dtype.size() {
                return Err(Error::CorruptCheckpoint(format!(
                    "`{name}`: byte length {} does not match shape {:?}",
                    entry.length, entry.shape
                )));
            }
            let chunk = payload
                .get(entry.offset..entry.offset + entry.length)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("`{name}`: payload out of bounds")))?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            entries.insert(name, Tensor::from_vec(&entry.shape, data)?);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl FromIterator<(String, Tensor)> for WeightStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}
