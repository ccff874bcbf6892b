//! STTF: a minimal portable tensor file.
//!
//! Layout: `b"STTF"`, version `u16`, rank `u16`, `rank` extents as `u64`,
//! then the payload as `f32`, all little-endian, row-major.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const STTF_MAGIC: &[u8; 4] = b"STTF";
pub const STTF_VERSION: u16 = 1;

/// Serializes a raw `f32` payload with the given extents.
pub fn encode_sttf_f32(shape: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len(), "STTF payload length");
    let mut out = Vec::with_capacity(8 + 8 * shape.len() + 4 * data.len());
    out.extend_from_slice(STTF_MAGIC);
    out.extend_from_slice(&STTF_VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Serializes a tensor, narrowing every value to `f32`.
pub fn encode_sttf(t: &Tensor) -> Vec<u8> {
    let narrowed: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
    encode_sttf_f32(t.shape(), &narrowed)
}

fn take<'a>(buf: &'a [u8], at: &mut usize, n: usize, origin: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| Error::Format {
        path: origin.to_string(),
        detail: format!("truncated STTF data: need {n} bytes at offset {at}, have {}", buf.len()),
    })?;
    let s = &buf[*at..end];
    *at = end;
    Ok(s)
}

/// Parses one STTF record from the front of `buf`, returning the tensor and
/// the number of bytes consumed. `origin` labels error messages.
pub fn decode_sttf(buf: &[u8], origin: &str) -> Result<(Tensor, usize)> {
    let fmt = |detail: String| Error::Format {
        path: origin.to_string(),
        detail,
    };
    let mut at = 0;
    let magic = take(buf, &mut at, 4, origin)?;
    if magic != STTF_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(take(buf, &mut at, 2, origin)?.try_into().unwrap());
    if version != STTF_VERSION {
        return Err(fmt(format!("unsupported STTF version {version}")));
    }
    let rank = u16::from_le_bytes(take(buf, &mut at, 2, origin)?.try_into().unwrap()) as usize;
    if rank == 0 {
        return Err(fmt("rank must be at least 1".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(buf, &mut at, 8, origin)?.try_into().unwrap());
        if d == 0 {
            return Err(fmt("zero extent".into()));
        }
        shape.push(usize::try_from(d).map_err(|_| fmt(format!("extent {d} too large")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt("extent product overflows".into()))?;
    let bytes = n.checked_mul(4).ok_or_else(|| fmt("payload too large".into()))?;
    let payload = take(buf, &mut at, bytes, origin)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((Tensor::new(&shape, data)?, at))
}

pub fn save_sttf(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_sttf(t)).map_err(|e| Error::io(path, e))
}

pub fn load_sttf(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let (t, used) = decode_sttf(&buf, &origin)?;
    if used != buf.len() {
        return Err(Error::Format {
            path: origin,
            detail: format!("{} trailing bytes", buf.len() - used),
        });
    }
    Ok(t)
}
