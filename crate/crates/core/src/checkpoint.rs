//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LPT1" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 n_tensors
//! per tensor: u16 name_len | name | u8 dtype | u8 rank | rank × u64 extents
//!             | u64 offset | u64 byte_len
//! body: raw f64 values, offsets relative to the start of the body
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LPT1";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config_digest: String,
    pub stage: String,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Base seed of the run; every random stream is re-derived from it and
    /// the epoch counter.
    pub rng_seed: u64,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint {
            offset: 8,
            reason: format!("metadata encoding: {e}"),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let name_bytes = name.as_bytes();
            let name_len = u16::try_from(name_bytes.len()).map_err(|_| Error::CheckpointTensor {
                name: name.clone(),
                reason: "name longer than 65535 bytes".into(),
            })?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(DTYPE_F64);
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            let len = (t.numel() * 8) as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            offset += len;
        }
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos as u64;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: Metadata = serde_json::from_slice(meta_bytes).map_err(|e| Error::Checkpoint {
            offset: meta_at,
            reason: format!("metadata: {e}"),
        })?;
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let entry_at = r.pos as u64;
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec()).map_err(|_| Error::Checkpoint {
                offset: entry_at,
                reason: "tensor name is not UTF-8".into(),
            })?;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F64 {
                return Err(Error::CheckpointTensor {
                    name,
                    reason: format!("unknown dtype code {dtype}"),
                });
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let offset = r.u64("offset")?;
            let len = r.u64("byte length")?;
            entries.push((name, shape, offset, len));
        }
        let body = &bytes[r.pos..];
        let body_at = r.pos as u64;
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for (name, shape, offset, len) in entries {
            let numel: usize = shape.iter().product();
            if shape.is_empty() || len != (numel * 8) as u64 {
                return Err(Error::CheckpointTensor {
                    name,
                    reason: format!("shape {shape:?} needs {} bytes, directory says {len}", numel * 8),
                });
            }
            if offset != expected_offset {
                return Err(Error::CheckpointTensor {
                    name,
                    reason: format!("offset {offset} does not follow previous tensor (expected {expected_offset})"),
                });
            }
            let end = offset + len;
            if end > body.len() as u64 {
                return Err(Error::CheckpointTensor {
                    name,
                    reason: format!(
                        "needs body bytes {offset}..{end} but body holds {} (file offset {})",
                        body.len(),
                        body_at + offset
                    ),
                });
            }
            let data = body[offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            expected_offset = end;
            let t = Tensor::new(shape, data).map_err(|e| Error::CheckpointTensor {
                name: name.clone(),
                reason: e.to_string(),
            })?;
            tensors.insert(name, t);
        }
        if expected_offset != body.len() as u64 {
            return Err(Error::Checkpoint {
                offset: body_at + expected_offset,
                reason: format!("{} trailing bytes", body.len() as u64 - expected_offset),
            });
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE]).unwrap());
        tensors.insert("b.c".to_string(), Tensor::scalar(0.1));
        Checkpoint {
            meta: Metadata {
                config_digest: "abc".into(),
                stage: "phase1".into(),
                epoch: 3,
                rng_seed: 42,
                best_metric: Some(0.625),
                best_epoch: Some(2),
            },
            tensors,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_located() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { offset: 4, .. })));
        let truncated = &bytes[..bytes.len() - 3];
        match Checkpoint::from_bytes(truncated) {
            Err(Error::CheckpointTensor { name, .. }) => assert_eq!(name, "b.c"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Checkpoint::from_bytes(&bytes[..6]), Err(Error::Checkpoint { offset: 4, .. })));
    }
}
