//! Tensor files: 8-byte magic, u32 version, u32 flags, four u32 dims
//! `(h, w, n, c)`, then `h*w*n*c` float32 values. All little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lattice::{LatticeField, Shape};

pub const MAGIC: [u8; 8] = *b"LATTENS\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

pub fn encode(field: &LatticeField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * field.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for d in field.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in field.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<LatticeField> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TensorFormat(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(Error::TensorFormat("bad magic".into()));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(Error::TensorFormat(format!("unsupported version {version}")));
    }
    let flags = u32_at(bytes, 12);
    if flags != 0 {
        return Err(Error::TensorFormat(format!("unknown flags {flags:#x}")));
    }
    let dims: Vec<usize> = (0..4).map(|i| u32_at(bytes, 16 + 4 * i) as usize).collect();
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::TensorFormat("dims overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(Error::TensorFormat(format!(
            "shape {shape} needs {} payload bytes, found {}",
            count.saturating_mul(4),
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    LatticeField::from_vec(shape, values)
}

pub fn write_tensor(path: &Path, field: &LatticeField) -> Result<Vec<u8>> {
    let bytes = encode(field);
    fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn read_tensor(path: &Path) -> Result<LatticeField> {
    decode(&fs::read(path)?)
}
