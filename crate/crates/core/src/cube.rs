//! Binary cube files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `HSICUBE\0` |
//! | 1 | version (1) |
//! | 12 | `n1`, `n2`, `n3` as `u32` |
//! | `4·n1·n2·n3` | `f32` samples, band by band, each band row-major |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const CUBE_MAGIC: &[u8; 8] = b"HSICUBE\0";
pub const CUBE_VERSION: u8 = 1;
const HEADER_LEN: usize = 8 + 1 + 12;

pub fn encode_cube(t: &Tensor3) -> Result<Vec<u8>> {
    let (n1, n2, n3) = t.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(CUBE_MAGIC);
    out.push(CUBE_VERSION);
    for n in [n1, n2, n3] {
        let n = u32::try_from(n).map_err(|_| Error::InvalidDims(format!("extent {n} exceeds u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    for k in 0..n3 {
        for v in t.band(k).iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<Tensor3> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != CUBE_MAGIC {
        return Err(Error::Format("not a cube file (bad magic)".into()));
    }
    if bytes[8] != CUBE_VERSION {
        return Err(Error::Format(format!("unsupported cube version {}", bytes[8])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[9 + 4 * i..13 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n1, n2, n3) = (dim(0), dim(1), dim(2));
    let count = n1
        .checked_mul(n2)
        .and_then(|v| v.checked_mul(n3))
        .ok_or_else(|| Error::Format("cube dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * count {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            4 * count
        )));
    }
    let mut data = ndarray::Array3::<f64>::zeros((n1, n2, n3));
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    for k in 0..n3 {
        for i in 0..n1 {
            for j in 0..n2 {
                data[[i, j, k]] = values.next().expect("length checked");
            }
        }
    }
    Tensor3::new(data)
}

pub fn write_cube(path: impl AsRef<Path>, t: &Tensor3) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_cube(t)?)?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<Tensor3> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_cube(&bytes)
}
