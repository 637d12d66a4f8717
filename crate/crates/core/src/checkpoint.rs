//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RLSH" | u32 version | u32 len, meta JSON
//! u32 tensor count | per tensor: u32 len, name | u32 rank | u64 dims.. | f64 data..
//! u32 spec count   | per spec:   u32 len, layer name | u32 len, GroupingSpec JSON
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::relu_variants::GroupingSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RLSH";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: String,
    pub variant: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
    pub specs: Vec<(String, GroupingSpec)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the checkpoint's u32 fields")))?;
    out.extend(v.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, b.len())?;
    out.extend(b);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::format("checkpoint name is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.meta)?)?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes())?;
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.specs.len())?;
        for (name, spec) in &self.specs {
            put_bytes(&mut out, name.as_bytes())?;
            put_bytes(&mut out, &serde_json::to_vec(spec)?)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(r.bytes()?).map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(format!("tensor `{name}` has an absurd shape")))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::format("tensor too large"))?)?;
            let data = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let count = r.u32()?;
        let mut specs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let spec: GroupingSpec = serde_json::from_slice(r.bytes()?)
                .map_err(|e| Error::format(format!("grouping for `{name}`: {e}")))?;
            spec.validate()?;
            specs.push((name, spec));
        }
        if r.at != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
        }
        Ok(Checkpoint { meta, tensors, specs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
