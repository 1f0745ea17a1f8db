// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "KEDITCKP"
//! version      u32      = 1
//! config       7 × u64  n_layers, d_model, n_heads, d_ff, vocab_size, max_context, seed
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   dims       rank × u64
//!   data       product(dims) × f64, row-major
//! ```
//!
//! Model checkpoints and weight-delta exports share this container.

use std::path::Path;

use super::config::ModelConfig;
use super::model::TransformerModel;
use crate::diffcore::DTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KEDITCKP";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(config: &ModelConfig, tensors: &[(String, &DTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        config.n_layers as u64,
        config.d_model as u64,
        config.n_heads as u64,
        config.d_ff as u64,
        config.vocab_size as u64,
        config.max_context as u64,
        config.seed,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, DTensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic, not a kedit tensor container".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let config = ModelConfig {
        n_layers: r.usize()?,
        d_model: r.usize()?,
        n_heads: r.usize()?,
        d_ff: r.usize()?,
        vocab_size: r.usize()?,
        max_context: r.usize()?,
        seed: r.u64()?,
    };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, DTensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((config, tensors))
}

pub fn write_container(path: &Path, config: &ModelConfig, tensors: &[(String, &DTensor)]) -> Result<()> {
    crate::io::write_atomic(path, &encode(config, tensors))
}

pub fn read_container(path: &Path) -> Result<(ModelConfig, Vec<(String, DTensor)>)> {
    decode(&crate::io::read_artifact(path)?)
}

impl TransformerModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let named: Vec<(String, &DTensor)> = self.named_params().map(|(n, t)| (n.to_string(), t)).collect();
        encode(self.config(), &named)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, tensors) = decode(bytes)?;
        TransformerModel::from_named(config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, tensors) = read_container(path)?;
        TransformerModel::from_named(config, tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_context: 12,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = TransformerModel::init(tiny()).unwrap();
        let bytes = m.to_bytes();
        let back = TransformerModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corrupt_input() {
        let m = TransformerModel::init(tiny()).unwrap();
        let mut bytes = m.to_bytes();
        assert!(matches!(TransformerModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(TransformerModel::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_reported_as_missing_artifact() {
        let err = TransformerModel::load(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
