//! Flat binary parameter checkpoints.
//!
//! Layout (little-endian): magic `HVCK`, `u32` parameter count, then per
//! parameter `u32` name length, UTF-8 name bytes, `u32` rank, `rank × u32`
//! extents, and the `f64` payload in row-major order.

use std::io::Read;
use std::path::Path;

use super::tape::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"HVCK";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode(mut bytes: &[u8]) -> Result<ParamStore> {
    let r = &mut bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > r.len() {
            return Err(Error::Format("truncated parameter name".into()));
        }
        let (name, rest) = r.split_at(len);
        let name = std::str::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        *r = rest;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n * 8 > r.len() {
            return Err(Error::Format(format!("truncated payload for '{name}'")));
        }
        let data = r[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *r = &r[n * 8..];
        store.add(name, Tensor::new(shape, data)?)?;
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.len())));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    write_atomic(path, &encode(store))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
