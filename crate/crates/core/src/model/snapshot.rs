use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::decoder::Decoder;
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"ASKDSNAP";
pub const SNAPSHOT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8 + 8;

/// Immutable copy of decoder parameters taken at the end of an epoch.
///
/// File layout, all integers little-endian:
/// `magic[8] | version u32 | config sha256[32] | epoch u64 | count u64 | f64 × count`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub params: Vec<f64>,
}

impl ModelSnapshot {
    pub fn capture(decoder: &Decoder, epoch: u64) -> Self {
        Self {
            config_hash: decoder.config().hash(),
            epoch,
            params: decoder.flat_params(),
        }
    }

    /// Rebuilds a decoder; the config must hash to the recorded value.
    pub fn restore(&self, cfg: &ModelConfig) -> Result<Decoder> {
        if cfg.hash() != self.config_hash {
            return Err(Error::Snapshot(format!(
                "config hash mismatch: snapshot {} vs config {}",
                hex::encode(self.config_hash),
                cfg.hash_hex()
            )));
        }
        Decoder::from_flat(cfg.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.params.len());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("not a snapshot file".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = bytes[12..44].try_into().unwrap();
        let epoch = u64_at(44);
        let count = u64_at(52) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * 8 {
            return Err(Error::Snapshot(format!(
                "expected {count} parameters, found {} bytes",
                body.len()
            )));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            config_hash,
            epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("snap.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
