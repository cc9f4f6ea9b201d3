//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! | field            | type                                   |
//! |------------------|----------------------------------------|
//! | magic            | 8 bytes `PYATCKPT`                     |
//! | format version   | u32 (currently 1)                      |
//! | model config     | 8 x u32 (image_size, patch_size, channels, embed_dim, depth, n_heads, mlp_dim, n_classes), 2 x f64 (dropout_p, stochdepth_p) |
//! | training step    | u64                                    |
//! | tensor count     | u32                                    |
//! | per tensor       | u32 name length, UTF-8 layer path, u32 rank, u32 extent per axis, f32 values in row-major order |
//! | optimizer flag   | u8 (0 or 1)                            |
//! | optimizer state  | if flag: u64 length n, n x f32 first moments, n x f32 second moments |
//! | checksum         | u64 FNV-1a over every preceding byte   |

use std::fs;
use std::path::Path;

use crate::backbone::{ModelConfig, ModelParams, Weights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"PYATCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Adaptive-moment optimizer state, flattened in tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerMoments {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub step: u64,
    pub optimizer: Option<OptimizerMoments>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let c = &ckpt.params.config;
    for v in [
        c.image_size,
        c.patch_size,
        c.channels,
        c.embed_dim,
        c.depth,
        c.n_heads,
        c.mlp_dim,
        c.n_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.dropout_p.to_le_bytes());
    out.extend_from_slice(&c.stochdepth_p.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let tensors = ckpt.params.weights.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &ckpt.optimizer {
        None => out.push(0),
        Some(m) => {
            out.push(1);
            out.extend_from_slice(&(m.first.len() as u64).to_le_bytes());
            for v in m.first.iter().chain(&m.second) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing magic header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        image_size: dims[0],
        patch_size: dims[1],
        channels: dims[2],
        embed_dim: dims[3],
        depth: dims[4],
        n_heads: dims[5],
        mlp_dim: dims[6],
        n_classes: dims[7],
        dropout_p: r.f64()?,
        stochdepth_p: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored model config invalid: {e}")))?;
    let step = r.u64()?;
    let mut weights = Weights::<f32>::zeros(&config);
    let count = r.u32()? as usize;
    let mut slots = weights.tensors_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, model needs {}",
            slots.len()
        )));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Checkpoint(format!("expected tensor {expected_name}, found {name}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let values = r.f32s(slot.len())?;
        for (dst, v) in slot.iter_mut().zip(values) {
            *dst = v;
        }
    }
    drop(slots);
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let n = r.u64()? as usize;
            Some(OptimizerMoments {
                first: r.f32s(n)?,
                second: r.f32s(n)?,
            })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
    }
    Ok(Checkpoint {
        params: ModelParams { config, weights },
        step,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Parameters of any precision, stored as `f32` without optimizer state.
pub fn save_params<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            params: params.cast(),
            step: 0,
            optimizer: None,
        },
    )
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    Ok(load_checkpoint(path)?.params.cast())
}
