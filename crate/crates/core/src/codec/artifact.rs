//! PVQT tokenizer artifacts.
//!
//! Layout: magic `PVQT`, u32 version, u32 header length, UTF-8 JSON
//! header, raw little-endian f32 weight blobs in header order, then a
//! CRC-64 (XZ parameters) over every preceding byte.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::msvq::{Tokenizer, TokenizerConfig};

pub const PVQT_MAGIC: [u8; 4] = *b"PVQT";
pub const PVQT_VERSION: u32 = 1;

const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const ADAPTER_PREFIX: &str = "adapter/";

/// How an artifact's weights were produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingFingerprint {
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub tiles: u64,
    /// CRC-64 of the training feature bytes, when known.
    pub data_crc: Option<u64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TokenizerConfig,
    fingerprint: TrainingFingerprint,
    blobs: Vec<BlobEntry>,
}

/// A frozen tokenizer plus optional adapter weights trained on top of it.
#[derive(Debug, Clone)]
pub struct TokenizerArtifact {
    pub tokenizer: Tokenizer<f32>,
    pub fingerprint: TrainingFingerprint,
    pub adapter: Option<ParamStore<f32>>,
}

impl TokenizerArtifact {
    pub fn new(tokenizer: Tokenizer<f32>, fingerprint: TrainingFingerprint) -> Self {
        TokenizerArtifact { tokenizer, fingerprint, adapter: None }
    }

    fn blobs(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> =
            self.tokenizer.store.iter().map(|(_, name, t)| (name.to_string(), t)).collect();
        if let Some(a) = &self.adapter {
            out.extend(a.iter().map(|(_, name, t)| (format!("{ADAPTER_PREFIX}{name}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blobs = self.blobs();
        let mut offset = 0u64;
        let entries = blobs
            .iter()
            .map(|(name, t)| {
                let bytes = t.len() as u64 * 4;
                let e = BlobEntry { name: name.clone(), shape: t.shape().to_vec(), offset, bytes };
                offset += bytes;
                e
            })
            .collect();
        let header = Header { config: self.tokenizer.cfg.clone(), fingerprint: self.fingerprint.clone(), blobs: entries };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len()).map_err(|_| Error::Format("artifact header exceeds u32".into()))?;

        let mut out = Vec::with_capacity(12 + json.len() + offset as usize + 8);
        out.extend_from_slice(&PVQT_MAGIC);
        out.extend_from_slice(&PVQT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &blobs {
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
            return Err(Error::Truncated("artifact magic".into()));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != PVQT_MAGIC {
            return Err(Error::BadMagic { expected: PVQT_MAGIC, found });
        }
        if bytes.len() < 12 + 8 {
            return Err(Error::Truncated("artifact preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != PVQT_VERSION {
            return Err(Error::Version(version));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if 12 + header_len + 8 > bytes.len() {
            return Err(Error::Truncated(format!("header of {header_len} bytes")));
        }
        let parsed: std::result::Result<Header, _> = serde_json::from_slice(&bytes[12..12 + header_len]);
        let body_end = bytes.len() - 8;
        if let Ok(h) = &parsed {
            let declared: u64 = h.blobs.iter().map(|b| b.bytes).sum();
            if ((12 + header_len) as u64 + declared) > body_end as u64 {
                return Err(Error::Truncated(format!(
                    "header declares {declared} blob bytes, file holds {}",
                    body_end - 12 - header_len
                )));
            }
        }
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        let computed = CRC.checksum(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let header = parsed?;
        let blob_area = &bytes[12 + header_len..body_end];

        let mut expected_offset = 0u64;
        for b in &header.blobs {
            let want = b.shape.iter().product::<usize>() as u64 * 4;
            if b.bytes != want || b.offset != expected_offset {
                return Err(Error::Format(format!("blob `{}` metadata inconsistent with shape {:?}", b.name, b.shape)));
            }
            expected_offset += b.bytes;
        }
        if expected_offset != blob_area.len() as u64 {
            return Err(Error::Format(format!(
                "blob area holds {} bytes, header declares {expected_offset}",
                blob_area.len()
            )));
        }
        let read_blob = |b: &BlobEntry| -> Result<Tensor<f32>> {
            let raw = &blob_area[b.offset as usize..(b.offset + b.bytes) as usize];
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Tensor::new(b.shape.clone(), data)
        };

        let mut tokenizer = Tokenizer::<f32>::new(header.config.clone())?;
        let mut adapter: Option<ParamStore<f32>> = None;
        let mut filled = vec![false; tokenizer.store.len()];
        for b in &header.blobs {
            if let Some(name) = b.name.strip_prefix(ADAPTER_PREFIX) {
                adapter.get_or_insert_with(ParamStore::new).add(name, read_blob(b)?);
                continue;
            }
            let id = tokenizer
                .store
                .find(&b.name)
                .ok_or_else(|| Error::Format(format!("artifact blob `{}` has no slot in the configured tokenizer", b.name)))?;
            if filled[id.index()] {
                return Err(Error::Format(format!("duplicate blob `{}`", b.name)));
            }
            tokenizer.store.set(id, read_blob(b)?)?;
            filled[id.index()] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            let id = tokenizer.store.ids().nth(i).expect("index in range");
            return Err(Error::Format(format!("artifact lacks weights for `{}`", tokenizer.store.name(id))));
        }
        Ok(TokenizerArtifact { tokenizer, fingerprint: header.fingerprint, adapter })
    }
}

pub fn save_artifact(path: impl AsRef<Path>, artifact: &TokenizerArtifact) -> Result<()> {
    let bytes = artifact.to_bytes()?;
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<TokenizerArtifact> {
    TokenizerArtifact::from_bytes(&std::fs::read(path)?)
}
