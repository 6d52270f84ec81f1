//! Flat binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"GKCKPT\0\0"            8-byte magic
//! u64 LE                    header length in bytes
//! header                    UTF-8 JSON, see [`Header`]
//! payload                   f64 LE values of every tensor, in header order
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 8] = b"GKCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint payload truncated or inconsistent: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub format_version: u32,
    /// Hash of the model configuration the weights were produced with.
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|e| CheckpointError::Corrupt(format!("{}: {e}", entry.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&entry.shape, data)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                rest.len()
            )));
        }
        Ok(Self {
            config_hash: header.config_hash,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 0..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            let t = Tensor::new(&[rows, cols], values[..rows * cols].to_vec()).unwrap();
            let ck = Checkpoint {
                config_hash: "abc".into(),
                tensors: vec![("w".into(), t), ("b".into(), Tensor::scalar(0.25))],
            };
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            prop_assert_eq!(Checkpoint::read_from(&buf[..]).unwrap(), ck);
        }
    }

    #[test]
    fn header_is_json_after_magic() {
        let ck = Checkpoint {
            config_hash: "h".into(),
            tensors: vec![("a.b".into(), Tensor::ones(&[2]))],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&buf[16..16 + len]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["tensors"][0]["shape"], serde_json::json!([2]));
        assert_eq!(buf.len(), 16 + len + 16);
        assert_eq!(&buf[16 + len..24 + len], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOTACKPT\0\0\0\0\0\0\0\0"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let ck = Checkpoint {
            config_hash: "h".into(),
            tensors: vec![("a".into(), Tensor::ones(&[4]))],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Checkpoint::read_from(&buf[..]),
            Err(CheckpointError::Corrupt(_))
        ));
    }
}
