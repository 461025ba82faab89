//! PVQW weight checkpoints: a named set of f32 tensors plus free-form
//! JSON metadata describing the model that owns them.
//!
//! Layout: magic `PVQW`, u32 version, u32 header length, UTF-8 JSON
//! header, raw little-endian f32 blobs in header order, CRC-64 (XZ) over
//! every preceding byte.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const PVQW_MAGIC: [u8; 4] = *b"PVQW";
pub const PVQW_VERSION: u32 = 1;

const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct WeightsFile {
    pub meta: serde_json::Value,
    pub store: ParamStore<f32>,
}

impl WeightsFile {
    pub fn new(store: ParamStore<f32>, meta: serde_json::Value) -> Self {
        WeightsFile { meta, store }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self
            .store
            .iter()
            .map(|(id, name, t)| Entry { name: name.to_string(), shape: t.shape().to_vec(), trainable: self.store.is_trainable(id) })
            .collect();
        let json = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors })?;
        let header_len = u32::try_from(json.len()).map_err(|_| Error::Format("weights header exceeds u32".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + self.store.total_count() * 4 + 8);
        out.extend_from_slice(&PVQW_MAGIC);
        out.extend_from_slice(&PVQW_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = CRC.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("weights magic".into()));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != PVQW_MAGIC {
            return Err(Error::BadMagic { expected: PVQW_MAGIC, found });
        }
        if bytes.len() < 12 + 8 {
            return Err(Error::Truncated("weights preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != PVQW_VERSION {
            return Err(Error::Version(version));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body_end = bytes.len() - 8;
        if 12 + header_len > body_end {
            return Err(Error::Truncated(format!("header of {header_len} bytes")));
        }
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        let computed = CRC.checksum(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
        let mut blobs = &bytes[12 + header_len..body_end];
        let mut store = ParamStore::new();
        for e in &header.tensors {
            let len = e.shape.iter().product::<usize>() * 4;
            if len > blobs.len() {
                return Err(Error::Truncated(format!("tensor `{}`", e.name)));
            }
            let (raw, rest) = blobs.split_at(len);
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if store.find(&e.name).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
            }
            let id = store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            store.set_trainable(id, e.trainable);
            blobs = rest;
        }
        if !blobs.is_empty() {
            return Err(Error::Format(format!("{} bytes after the last tensor", blobs.len())));
        }
        Ok(WeightsFile { meta: header.meta, store })
    }
}

pub fn save_weights(path: impl AsRef<Path>, weights: &WeightsFile) -> Result<()> {
    let bytes = weights.to_bytes()?;
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightsFile> {
    WeightsFile::from_bytes(&std::fs::read(path)?)
}
