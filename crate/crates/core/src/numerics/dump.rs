//! Tensor dump files: `PTHR1`, little-endian `u32` rank, `u32` per
//! dimension, then the row-major payload as `f32`.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PTHR1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * (1 + t.shape().len() + t.numel()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| "missing PTHR1 magic".to_string())?;
    let mut words = rest.chunks_exact(4);
    let mut next = |what: &str| {
        words
            .next()
            .map(|w| [w[0], w[1], w[2], w[3]])
            .ok_or_else(|| format!("truncated while reading {what}"))
    };
    let rank = u32::from_le_bytes(next("rank")?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(next("shape")?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f32::from_le_bytes(next("payload")?) as f64);
    }
    if rest.len() != 4 * (1 + rank + n) {
        return Err(format!(
            "expected {} bytes after magic, found {}",
            4 * (1 + rank + n),
            rest.len()
        ));
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_dump(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|msg| Error::Dump {
        path: path.to_path_buf(),
        msg,
    })
}
