//! N-dimensional arrays and their portable binary encoding.
//!
//! Layout: magic `FCK1`, then `dtype`, `rank` and each dimension as
//! little-endian `u64`, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FCK1";

/// Scalar types that can be stored in an [`NdArray`] file.
pub trait Element: Copy + PartialEq + std::fmt::Debug {
    const DTYPE: u64;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: u64 = 1;
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: u64 = 2;
    const SIZE: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Element for u8 {
    const DTYPE: u64 = 3;
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Element> NdArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("array", n, data.len()));
        }
        Ok(NdArray { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * (2 + self.shape.len()) + self.data.len() * T::SIZE);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&T::DTYPE.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u64).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Decodes bytes produced by [`NdArray::to_bytes`]; `field` names the
    /// array in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path, field: &str) -> Result<Self> {
        let bad = |reason: String| Error::Load {
            path: path.to_path_buf(),
            field: field.to_string(),
            reason,
        };
        let u64_at = |off: usize| -> Result<u64> {
            bytes
                .get(off..off + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .ok_or_else(|| bad("truncated header".into()))
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let dtype = u64_at(4)?;
        if dtype != T::DTYPE {
            return Err(bad(format!("dtype code {dtype}, expected {}", T::DTYPE)));
        }
        let rank = u64_at(12)? as usize;
        if rank > 16 {
            return Err(bad(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(u64_at(20 + 8 * i)? as usize);
        }
        let start = 20 + 8 * rank;
        let n: usize = shape.iter().product();
        let payload = &bytes[start.min(bytes.len())..];
        if payload.len() != n * T::SIZE {
            return Err(bad(format!(
                "payload holds {} bytes, shape {shape:?} needs {}",
                payload.len(),
                n * T::SIZE
            )));
        }
        let data = payload.chunks_exact(T::SIZE).map(T::read_le).collect();
        Ok(NdArray { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, field: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            field: field.to_string(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path, field)
    }
}
