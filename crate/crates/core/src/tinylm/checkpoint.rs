//! Binary checkpoint format: magic, format version, config as JSON, value
//! width, then the flat parameter vector in little-endian order.

use std::path::Path;

use super::params::ModelParams;
use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};
use crate::records;

const MAGIC: &[u8; 4] = b"TSLM";
const VERSION: u32 = 1;

pub fn checkpoint_bytes<F: Scalar>(p: &ModelParams<F>) -> Vec<u8> {
    let config = serde_json::to_vec(&p.config).expect("config serializes");
    let mut out = Vec::with_capacity(32 + config.len() + p.data.len() * F::WIDTH as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.push(F::WIDTH);
    out.extend_from_slice(&(p.data.len() as u64).to_le_bytes());
    for &x in &p.data {
        match F::WIDTH {
            4 => out.extend_from_slice(&(x.f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&x.f64().to_le_bytes()),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Invalid(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decode a checkpoint into precision `F`. Values stored at the same width
/// come back bit-exact.
pub fn parse_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<ModelParams<F>> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Invalid("not a model checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Invalid(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(len)?)
        .map_err(|e| Error::Invalid(format!("checkpoint config: {e}")))?;
    let width = c.take(1)?[0];
    let count = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
    let raw = c.take(count * width as usize)?;
    if c.at != bytes.len() {
        return Err(Error::Invalid("trailing bytes after checkpoint values".into()));
    }
    let data: Vec<F> = match width {
        4 => raw
            .chunks_exact(4)
            .map(|b| F::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect(),
        8 => raw
            .chunks_exact(8)
            .map(|b| F::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect(),
        w => return Err(Error::Invalid(format!("unsupported value width {w}"))),
    };
    ModelParams::from_data(&config, data)
}

pub fn write_checkpoint<F: Scalar>(path: &Path, p: &ModelParams<F>) -> Result<()> {
    records::write_file(path, &checkpoint_bytes(p))
}

pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<ModelParams<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            context_len: 6,
            vocab_size: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ModelParams::<f32>::init(&cfg(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_checkpoint(&path, &p).unwrap();
        let q: ModelParams<f32> = read_checkpoint(&path).unwrap();
        assert!(p.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(p.config, q.config);
        assert_eq!(p.checksum(), q.checksum());
        let p64 = p.cast::<f64>();
        let q64: ModelParams<f64> = parse_checkpoint(&checkpoint_bytes(&p64)).unwrap();
        assert_eq!(p64, q64);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let p = ModelParams::<f32>::init(&cfg(), 1).unwrap();
        let bytes = checkpoint_bytes(&p);
        assert!(parse_checkpoint::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_checkpoint::<f32>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(parse_checkpoint::<f32>(&long).is_err());
        let missing = read_checkpoint::<f32>(Path::new("/nonexistent/ckpt.bin")).unwrap_err();
        assert!(matches!(missing, Error::MissingArtifact(_)));
    }
}
