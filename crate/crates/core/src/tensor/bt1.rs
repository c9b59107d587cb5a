//! `BT1` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"BTEN" | u32 version = 1 | u32 ndim | ndim × u32 dims | u8 dtype | payload
//! ```
//!
//! `dtype` 0 is `float32` little-endian, 1 is `uint8`. The payload is the
//! row-major element buffer and nothing may follow it.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BTEN";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
}

/// Decoded contents of a BT1 file.
#[derive(Clone, Debug, PartialEq)]
pub enum Bt1 {
    F32(Tensor<f32>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Bt1 {
    pub fn shape(&self) -> &[usize] {
        match self {
            Bt1::F32(t) => t.shape(),
            Bt1::U8 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Bt1::F32(_) => DType::F32,
            Bt1::U8 { .. } => DType::U8,
        }
    }
}

fn header(shape: &[usize], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype as u8);
    out
}

pub fn encode_f32(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = header(t.shape(), DType::F32);
    out.reserve(4 * t.numel());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_u8(shape: &[usize], data: &[u8]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = header(shape, DType::U8);
    out.extend_from_slice(data);
    out
}

/// Parses a BT1 buffer. `name` identifies the source in error messages.
pub fn decode(bytes: &[u8], name: &str) -> Result<Bt1> {
    let err = |msg: String| Error::format(name, msg);
    let mut cursor = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let end = cursor
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err(format!("truncated while reading {what}")))?;
        let s = &bytes[cursor..end];
        cursor = end;
        Ok(s)
    };
    if take(4, "magic")? != MAGIC {
        return Err(err("bad magic (expected BTEN)".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let version = u32_at(take(4, "version")?);
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let ndim = u32_at(take(4, "ndim")?) as usize;
    let mut shape = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        shape.push(u32_at(take(4, "dims")?) as usize);
    }
    let dtype = take(1, "dtype")?[0];
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err("element count overflows".into()))?;
    let decoded = match dtype {
        0 => {
            let payload = take(
                numel.checked_mul(4).ok_or_else(|| err("payload too large".into()))?,
                "payload",
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Bt1::F32(Tensor::new(shape, data)?)
        }
        1 => {
            let data = take(numel, "payload")?.to_vec();
            Bt1::U8 { shape, data }
        }
        other => return Err(err(format!("unknown dtype code {other}"))),
    };
    if cursor != bytes.len() {
        return Err(err(format!("{} trailing bytes after payload", bytes.len() - cursor)));
    }
    Ok(decoded)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Bt1> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    match read(path)? {
        Bt1::F32(t) => Ok(t),
        Bt1::U8 { .. } => Err(Error::format(path.display().to_string(), "expected float32 payload")),
    }
}
