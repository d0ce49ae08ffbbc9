//! Checkpoint file:
//!
//! ```text
//! "ZSCK" | version u8 | meta_len u32 | meta JSON | n_tensors u32 |
//!   n_tensors x (name_len u16 | name | ndim u8 | ndim x u32 | f32 data)
//! ```
//!
//! Integers and floats are little-endian. Parameters are stored as f32, so a
//! loaded checkpoint rewrites to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Tensor;
use super::model::{Counter, CounterConfig, CounterParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ZSCK";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    counter: CounterConfig,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub counter: Counter,
    /// Hash of the training configuration that produced the weights.
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&Meta {
            counter: self.counter.config.clone(),
            config_hash: self.config_hash.clone(),
        })
        .expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let params = &self.counter.params;
        let tensors = params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in params.names().iter().zip(tensors) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(format_err(0, "bad magic, expected \"ZSCK\""));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos;
        let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| format_err(meta_at, format!("metadata JSON: {e}")))?;
        meta.counter
            .validate()
            .map_err(|e| format_err(meta_at, e.to_string()))?;
        let mut params = CounterParams::init(&meta.counter);
        let names = params.names();
        let count_at = r.pos;
        let count = r.u32("tensor count")? as usize;
        if count != names.len() {
            return Err(format_err(count_at, format!("{count} tensors, architecture needs {}", names.len())));
        }
        for (expected, slot) in names.iter().zip(params.tensors_mut()) {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = r.take(len, "tensor name")?;
            if name != expected.as_bytes() {
                return Err(format_err(
                    at,
                    format!("tensor {:?}, expected {expected:?}", String::from_utf8_lossy(name)),
                ));
            }
            let shape_at = r.pos;
            let ndim = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            if shape != slot.shape {
                return Err(format_err(shape_at, format!("{expected} has shape {shape:?}, expected {:?}", slot.shape)));
            }
            let data_at = r.pos;
            let raw = r.take(4 * slot.len(), "tensor data")?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(format_err(data_at + 4 * i, format!("non-finite value in {expected}")));
            }
            *slot = Tensor { shape, data };
        }
        if r.pos != bytes.len() {
            return Err(format_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            counter: Counter::from_parts(meta.counter, params)?,
            config_hash: meta.config_hash,
        })
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    crate::dataset::write_file(path, &checkpoint.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let counter = Counter::new(CounterConfig { skip: true, ..CounterConfig::tiny() }).unwrap();
        Checkpoint { counter, config_hash: "0123456789abcdef".into() }
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let bytes = sample().to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.config_hash, "0123456789abcdef");
        assert_eq!(loaded.counter.config, sample().counter.config);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.zsck");
        write_checkpoint(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(read_checkpoint(&path).unwrap(), loaded);
    }

    fn offset_of(bytes: &[u8]) -> usize {
        match Checkpoint::from_bytes(bytes) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn corruption_is_located() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(&bad), 0);

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(offset_of(&bad), 4);

        assert_eq!(offset_of(&bytes[..bytes.len() - 3]), {
            // Truncation is reported where the last tensor's data begins.
            let head = Checkpoint::from_bytes(&bytes).unwrap();
            let last = head.counter.params.tensors().last().unwrap().len();
            bytes.len() - 4 * last
        });

        let mut bad = bytes.clone();
        bad.push(0);
        assert_eq!(offset_of(&bad), bytes.len());

        let meta_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let first_name = 9 + meta_len + 4;
        let mut bad = bytes.clone();
        bad[first_name + 2] ^= 0x20;
        assert_eq!(offset_of(&bad), first_name);

        let name_len = u16::from_le_bytes(bytes[first_name..first_name + 2].try_into().unwrap()) as usize;
        let shape_at = first_name + 2 + name_len;
        let mut bad = bytes.clone();
        bad[shape_at + 1] += 1;
        assert_eq!(offset_of(&bad), shape_at);

        let ndim = bytes[shape_at] as usize;
        let data_at = shape_at + 1 + 4 * ndim;
        let mut bad = bytes.clone();
        bad[data_at + 4..data_at + 8].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(offset_of(&bad), data_at + 4);

        let mut bad = bytes.clone();
        bad[9] = b'!';
        assert_eq!(offset_of(&bad), 9);
    }
}
