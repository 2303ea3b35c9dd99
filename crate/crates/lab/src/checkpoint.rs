//! Checkpoint container: named tensors with shapes, guarded by a CRC-32.
//!
//! Layout (little endian): `SDCK`, version `u32`, tensor count `u64`, then per
//! tensor its name, rank `u32`, dims `u64 * rank`, values `f64 * prod(dims)`;
//! the CRC of all preceding bytes closes the file.

use std::fs;
use std::path::Path;

use stratdiff_core::nn::{Tensor, TensorMap};

use crate::codec::{Reader, Writer};
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u32 = 1;

pub fn encode(map: &TensorMap) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u64(map.len() as u64);
    for (name, t) in map {
        w.str(name);
        w.u32(t.shape.len() as u32);
        for &d in &t.shape {
            w.u64(d as u64);
        }
        w.f64s(&t.data);
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> std::result::Result<TensorMap, String> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let n = r.count(8)?;
    let mut map = TensorMap::new();
    for _ in 0..n {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("tensor `{name}` is too large"))?;
        if len.saturating_mul(8) > bytes.len() {
            return Err(format!("tensor `{name}` exceeds the file size"));
        }
        let data = r.f64s(len)?;
        if map.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(format!("duplicate tensor `{name}`"));
        }
    }
    r.end()?;
    Ok(map)
}

pub fn save(path: &Path, map: &TensorMap) -> Result<()> {
    fs::write(path, encode(map)).map_err(|e| LabError::io(path, e))
}

pub fn load(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes).map_err(|reason| LabError::format(path, reason))
}
