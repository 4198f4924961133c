//! Self-describing binary containers for model weights and training state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, `u32` array count, then per array a `u64` length followed by
//! little-endian `f64` values. All integers are little-endian.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, DenoiserParams, ModelMeta, Stage};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFCMCKPT";
pub const STATE_MAGIC: &[u8; 8] = b"PFCMSTAT";
pub const VERSION: u32 = 1;

/// JSON header plus flat `f64` arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub arrays: Vec<Vec<f64>>,
}

impl Container {
    pub fn encode(&self, magic: &[u8; 8]) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(32 + header.len() + 8 * self.arrays.iter().map(Vec::len).sum::<usize>());
        out.extend_from_slice(magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let hlen = cur.u64()? as usize;
        let header = serde_json::from_slice(cur.take(hlen)?)?;
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u64()? as usize;
            let raw = cur.take(len.checked_mul(8).ok_or_else(|| Error::Format("array too long".into()))?)?;
            arrays.push(
                raw.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            );
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(Container { header, arrays })
    }

    pub fn write(&self, magic: &[u8; 8], path: &Path) -> Result<()> {
        write_atomic(path, &self.encode(magic)?)
    }

    pub fn read(magic: &[u8; 8], path: &Path) -> Result<Self> {
        Self::decode(magic, &fs::read(path)?)
    }
}

/// Writes to a sibling file first so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    meta: ModelMeta,
    arch: Arch,
    n_params: usize,
}

pub fn encode_checkpoint(model: &DenoiserParams) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        meta: model.meta.clone(),
        arch: model.arch.clone(),
        n_params: model.weights.len(),
    };
    Container {
        header: serde_json::to_value(header)?,
        arrays: vec![model.weights.clone()],
    }
    .encode(CHECKPOINT_MAGIC)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenoiserParams> {
    let c = Container::decode(CHECKPOINT_MAGIC, bytes)?;
    let header: CheckpointHeader = serde_json::from_value(c.header)?;
    header.arch.validate()?;
    let weights = c.arrays.into_iter().next().unwrap_or_default();
    if weights.len() != header.n_params || weights.len() != header.arch.num_params() {
        return Err(Error::Format(format!(
            "checkpoint holds {} weights, architecture needs {}",
            weights.len(),
            header.arch.num_params()
        )));
    }
    let schedule = header.meta.schedule()?;
    if schedule.hash() != header.meta.schedule_hash {
        return Err(Error::MetadataMismatch(
            "stored schedule hash does not match the stored schedule parameters".into(),
        ));
    }
    Ok(DenoiserParams {
        meta: header.meta,
        arch: header.arch,
        weights,
    })
}

pub fn save_checkpoint(path: &Path, model: &DenoiserParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

/// Loads a checkpoint, refusing it when its stage differs from `expect`.
pub fn load_checkpoint(path: &Path, expect: Option<Stage>) -> Result<DenoiserParams> {
    let model = decode_checkpoint(&fs::read(path)?)?;
    if let Some(stage) = expect {
        model.meta.require_stage(stage)?;
    }
    Ok(model)
}
