//! `CEFV` feature matrices: little-endian, 32-bit floats on disk, promoted to
//! 64-bit on load.
//!
//! Layout: magic `CEFV`, u32 version (1), u32 row count, u32 dim, then
//! `rows * dim` f32 values in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CEFV";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(features: &Array2<f64>) -> Result<Vec<u8>> {
    let (rows, dim) = features.dim();
    let rows_u32 = u32::try_from(rows).map_err(|_| Error::Features("too many rows".into()))?;
    let dim_u32 = u32::try_from(dim).map_err(|_| Error::Features("dimension too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + rows * dim * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&rows_u32.to_le_bytes());
    out.extend_from_slice(&dim_u32.to_le_bytes());
    for &value in features.iter() {
        out.extend_from_slice(&(value as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Features("truncated header".into()));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Features("bad magic".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::Features(format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let dim = word(12) as usize;
    if dim == 0 {
        return Err(Error::Features("feature dimension must be positive".into()));
    }
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Features("header sizes overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Features(format!(
            "header declares {rows}x{dim} values ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, dim), values).expect("shape checked above"))
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

pub fn write_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let bytes = encode_features(features)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
