//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SEPG"  version:u32  config_len:u32  config:JSON
//! step:u64  rng_seed:u64  rng_word_pos:u128  blocks:u32  header_sum:[u8; 8]
//! per block, in name order:
//!   name_len:u16 name  dtype:u8  rank:u8  dims:u64*rank  payload_len:u64  payload  sum:[u8; 8]
//! ```
//!
//! Each `sum` is the first eight bytes of the SHA-256 of everything in its
//! section before it, so damage is reported against the block it hit.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{D0Mode, FusionConfig};
use crate::error::{Error, Result};
use crate::network::{Modality, Network};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SEPG";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: FusionConfig,
    pub params: ParamStore,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let d = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&d[..8]);
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.config.to_json();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let sum = checksum(&out);
        out.extend_from_slice(&sum);

        for (name, t) in self.params.iter() {
            let start = out.len();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.numel() * 8) as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let sum = checksum(&out[start..]);
            out.extend_from_slice(&sum);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(integrity("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let cfg_len = r.u32("config")? as usize;
        let cfg_bytes = r.take(cfg_len, "config")?;
        let step = r.u64("step")?;
        let rng_seed = r.u64("rng")?;
        let rng_word_pos = u128::from_le_bytes(r.take(16, "rng")?.try_into().expect("16 bytes"));
        let blocks = r.u32("blocks")?;
        let header_end = r.pos;
        let sum = r.take(8, "header")?;
        if sum != checksum(&bytes[..header_end]) {
            return Err(integrity("header", "checksum mismatch"));
        }
        let cfg_text = std::str::from_utf8(cfg_bytes).map_err(|_| integrity("config", "not UTF-8"))?;
        let config = FusionConfig::from_json(cfg_text).map_err(|e| integrity("config", e.to_string()))?;

        let mut params = ParamStore::new();
        let mut last: Option<String> = None;
        for idx in 0..blocks {
            let start = r.pos;
            let key = format!("block #{idx}");
            let name_len = r.u16(&key)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &key)?)
                .map_err(|_| integrity(&key, "block name is not UTF-8"))?
                .to_string();
            let dtype = r.u8(&name)?;
            if dtype != DTYPE_F64 {
                return Err(integrity(&name, format!("unknown dtype tag {dtype}")));
            }
            let rank = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let len = r.u64(&name)? as usize;
            let numel: usize = shape.iter().product();
            if len != numel.saturating_mul(8) {
                return Err(integrity(&name, format!("payload of {len} bytes does not match shape {shape:?}")));
            }
            let payload = r.take(len, &name)?;
            let end = r.pos;
            let sum = r.take(8, &name)?;
            if sum != checksum(&bytes[start..end]) {
                return Err(integrity(&name, "checksum mismatch"));
            }
            if last.as_deref().is_some_and(|l| l >= name.as_str()) {
                return Err(integrity(&name, "blocks out of order or duplicated"));
            }
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name.clone(), Tensor::new(&shape, data).map_err(|e| integrity(&name, e.to_string()))?);
            last = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(integrity("trailer", format!("{} unexpected bytes after the last block", bytes.len() - r.pos)));
        }
        if config.d0_mode == D0Mode::Frozen {
            for m in Modality::BOTH {
                params.freeze(&format!("enc.{m}.d0"));
            }
        }
        Ok(Self {
            config,
            params,
            step,
            rng_seed,
            rng_word_pos,
        })
    }

    /// Writes via a temporary sibling file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Checks that the stored blocks are exactly those `cfg` builds, with equal shapes.
    ///
    /// The error names the first mismatched block in name order.
    pub fn validate_against(&self, cfg: &FusionConfig) -> Result<()> {
        let expected = Network::new(cfg.clone())?.init(0)?;
        let mut names: Vec<&String> = expected.names().chain(self.params.names()).collect();
        names.sort();
        names.dedup();
        for name in names {
            match (expected.get(name), self.params.get(name)) {
                (Some(e), Some(s)) if e.shape() == s.shape() => {}
                (Some(e), Some(s)) => {
                    return Err(Error::Config(format!(
                        "block `{name}`: checkpoint has shape {:?}, configuration needs {:?}",
                        s.shape(),
                        e.shape()
                    )))
                }
                (Some(_), None) => return Err(Error::Config(format!("block `{name}`: missing from checkpoint"))),
                (None, _) => return Err(Error::Config(format!("block `{name}`: not part of this configuration"))),
            }
        }
        Ok(())
    }
}

fn integrity(key: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Integrity {
        key: key.into(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, key: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            integrity(key, format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, key: &str) -> Result<u8> {
        Ok(self.take(1, key)?[0])
    }

    fn u16(&mut self, key: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, key)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, key: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, key)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, key: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, key)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = FusionConfig::toy();
        let params = Network::new(cfg.clone()).unwrap().init(3).unwrap();
        Checkpoint {
            config: cfg,
            params,
            step: 17,
            rng_seed: 42,
            rng_word_pos: 1234,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Config(m)) if m.contains("version 9")));
    }

    #[test]
    fn flipped_payload_names_block() {
        let c = sample();
        let mut bytes = c.to_bytes();
        let n = bytes.len();
        bytes[n - 12] ^= 0x40;
        let last = c.params.names().last().unwrap().clone();
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Integrity { key, .. }) => assert_eq!(key, last),
            other => panic!("{other:?}"),
        }
    }
}
