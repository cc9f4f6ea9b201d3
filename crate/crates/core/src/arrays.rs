//! Portable float arrays.
//!
//! Layout (little-endian): 4-byte magic `PFA1`, `u32` rank, one `u32`
//! extent per axis, then the `f32` values in row-major order. Nothing else:
//! the file size is always `8 + 4 * rank + 4 * product(extents)`.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFA1";

pub fn encode(array: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * array.ndim() + 4 * array.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
    for &d in array.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ArrayD<f32>> {
    let bad = |m: &str| Error::shape(format!("portable array: {m}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let rank = word(4);
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i)).collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad("payload length does not match shape"));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad(&e.to_string()))
}

pub fn write(path: &Path, array: &ArrayD<f32>) -> Result<()> {
    fs::write(path, encode(array))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<ArrayD<f32>> {
    decode(&fs::read(path)?)
}
