//! Binary tensor container: `TNSR`, version byte, rank byte, rank × u32
//! dims, little-endian f32 payload, then FNV-1a 64 of everything before it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::fnv1a64;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

/// A dense f32 array of arbitrary rank.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorContainer {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidArgument(format!("dims {dims:?} not representable")));
        }
        Ok(TensorContainer { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len() + 8);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a TNSR container".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported container version {}", bytes[4])));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(Error::Checksum("tensor container".into()));
        }
        let rank = body[5] as usize;
        let header = 6 + 4 * rank;
        if body.len() < header {
            return Err(Error::Format("truncated container header".into()));
        }
        let dims: Vec<usize> = body[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let payload = &body[header..];
        let n: usize = dims.iter().product();
        if payload.len() != 4 * n {
            return Err(Error::Format(format!(
                "payload has {} bytes, dims {dims:?} need {}",
                payload.len(),
                4 * n
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(TensorContainer { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}
