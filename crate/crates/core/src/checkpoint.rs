//! Flat binary container of named parameter arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "HSIWGHT\0" | version u8 | count u32
//! per tensor: name_len u32 | name (UTF-8) | ndim u32 | dims u32 × ndim | f32 × Π dims
//! ```

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HSIWGHT\0";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub value: ArrayD<f64>,
}

pub fn encode_checkpoint(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let u32_of = |n: usize| u32::try_from(n).map_err(|_| Error::Format(format!("{n} exceeds u32")));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&u32_of(arrays.len())?.to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&u32_of(a.name.len())?.to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&u32_of(a.value.ndim())?.to_le_bytes());
        for d in a.value.shape() {
            out.extend_from_slice(&u32_of(*d)?.to_le_bytes());
        }
        for v in a.value.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()?;
    let mut arrays = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = c.u32()?;
        let dims = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| Error::Format(e.to_string()))?;
        arrays.push(NamedArray { name, value });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(arrays)
}

/// Every parameter of `store`, in registration order.
pub fn store_arrays(store: &ParamStore) -> Vec<NamedArray> {
    store
        .iter()
        .map(|p| NamedArray {
            name: p.name.clone(),
            value: p.value.clone(),
        })
        .collect()
}

/// Overwrites parameters of `store` by name. Every parameter must be present
/// with a matching shape.
pub fn load_into_store(store: &mut ParamStore, arrays: &[NamedArray]) -> Result<()> {
    for p in store.iter_mut() {
        let a = arrays
            .iter()
            .find(|a| a.name == p.name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{}`", p.name)))?;
        if a.value.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "`{}`: checkpoint {:?} vs model {:?}",
                p.name,
                a.value.shape(),
                p.value.shape()
            )));
        }
        p.value = a.value.clone();
    }
    Ok(())
}

pub fn save_store(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(&store_arrays(store))?)?;
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path)?;
    load_into_store(store, &decode_checkpoint(&bytes)?)
}
