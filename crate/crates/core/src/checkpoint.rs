//! Binary checkpoints.
//!
//! Layout, all integers little-endian: magic `SVMF`, version `u32`, tensor
//! count `u32`, then per tensor the name length `u32`, UTF-8 name, rank
//! `u32`, dims `u32 × rank` and `f32` data. A trailer holds the run
//! configuration text (length `u32` + bytes) and the step counter `u64`.
//! Batch-norm running statistics are stored as ordinary tensors.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SVMF";
pub const VERSION: u32 = 1;

const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub config: RunConfig,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit the 32-bit checkpoint field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let tensors: Vec<(&String, &Tensor<f32>)> = self.params.params().chain(self.params.buffers()).collect();
        put_u32(&mut out, tensors.len())?;
        for (name, t) in tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let text = self.config.to_text();
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    /// Parses the whole buffer before returning anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}, this build reads version {VERSION}")));
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name} extents overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            if BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s)) {
                params.insert_buffer(&name, t);
            } else {
                params.insert(&name, t);
            }
        }
        let text = r.string()?;
        let config = RunConfig::parse(&text).map_err(|e| Error::Format(format!("embedded configuration: {e}")))?;
        let step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { params, config, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
