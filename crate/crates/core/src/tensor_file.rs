//! The ATDT binary tensor format.
//!
//! Layout (little-endian):
//!
//! | offset     | size  | content                                  |
//! |------------|-------|------------------------------------------|
//! | 0          | 4     | magic `ATDT` (0x41 0x54 0x44 0x54)       |
//! | 4          | 1     | version, currently 1                     |
//! | 5          | 1     | rank `r`, at most 8                      |
//! | 6          | 4 * r | dimensions as `u32`                      |
//! | 6 + 4r     | 4 * n | values as IEEE-754 `f32`, row-major      |
//!
//! A rank-0 file holds a single scalar.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{AtdError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ATDT";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 8;

pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>> {
    if tensor.rank() > MAX_RANK {
        return Err(AtdError::contract(
            "write_tensor_file",
            format!("rank {} exceeds the format limit of {MAX_RANK}", tensor.rank()),
        ));
    }
    if let Some(bad) = tensor.data().iter().find(|v| !v.is_finite()) {
        return Err(AtdError::NumericDomain {
            op: "write_tensor_file",
            detail: format!("refusing to store {bad}"),
        });
    }
    let mut out = Vec::with_capacity(6 + 4 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| {
            AtdError::contract("write_tensor_file", format!("dimension {d} does not fit in u32"))
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, msg: String| AtdError::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected \"ATDT\"".into()));
    }
    match bytes.get(4) {
        Some(&VERSION) => {}
        Some(v) => return Err(fail(4, format!("unsupported version {v}"))),
        None => return Err(fail(4, "truncated header".into())),
    }
    let rank = *bytes.get(5).ok_or_else(|| fail(5, "truncated header".into()))? as usize;
    if rank > MAX_RANK {
        return Err(fail(5, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + 4 * i;
        let raw = bytes
            .get(off..off + 4)
            .ok_or_else(|| fail(off, "truncated dimension list".into()))?;
        let d = u32::from_le_bytes(raw.try_into().expect("4-byte slice")) as usize;
        if d == 0 {
            return Err(fail(off, "zero-length dimension".into()));
        }
        shape.push(d);
    }
    let payload_start = 6 + 4 * rank;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(6, "element count overflows".into()))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(payload_start))
        .ok_or_else(|| fail(6, "element count overflows".into()))?;
    if bytes.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data = bytes[payload_start..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

pub fn write_tensor_file(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor)?;
    fs::write(path, bytes).map_err(|e| AtdError::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let bytes = fs::read(&path).map_err(|e| AtdError::io(&path, e))?;
    decode_tensor(&bytes, &path)
}
