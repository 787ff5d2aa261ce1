//! Versioned binary checkpoints: magic `SDAT`, format version, the
//! completed-step count, a JSON config blob, then named f64 tensors with
//! shape headers. All integers and floats are little-endian. Tensors are
//! written in name order, so identical state always serializes to
//! identical bytes.

use super::ModelError;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDAT";
const CHECKPOINT_VERSION: u32 = 1;

/// A checkpoint's full content: step counter, config blob, and every
/// named tensor (parameters and optimizer moments alike).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_json: String,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let config = self.config_json.as_bytes();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.tensors {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &dim in shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let step = cur.u64()?;
        let config_len = cur.u32()? as usize;
        let config_json = String::from_utf8(cur.take(config_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("config blob is not UTF-8".into()))?;
        let tensor_count = cur.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..tensor_count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut len = 1usize;
            for _ in 0..rank {
                let dim = cur.u64()? as usize;
                len = len.checked_mul(dim).ok_or_else(|| {
                    ModelError::Checkpoint(format!("tensor {name} shape overflows"))
                })?;
                shape.push(dim);
            }
            let raw = cur.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(ModelError::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint {
            step,
            config_json,
            tensors,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(ModelError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), ModelError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
