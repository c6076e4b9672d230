//! Binary tensor container.
//!
//! Layout: `b"ECGF"`, version (u32), rank (u32), `rank` dims (u32), then the
//! row-major payload, all little-endian. Version 1 stores `f32`, version 2
//! stores `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::numkit::Tensor;

pub const MAGIC: [u8; 4] = *b"ECGF";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn from_version(v: u32) -> Result<Self, FormatError> {
        match v {
            1 => Ok(Precision::F32),
            2 => Ok(Precision::F64),
            other => Err(FormatError::UnsupportedVersion(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Size in bytes of an encoded tensor.
pub fn encoded_len(shape: &[usize], precision: Precision) -> usize {
    12 + 4 * shape.len() + precision.width() * shape.iter().product::<usize>()
}

pub fn encode(tensor: &Tensor, precision: Precision) -> Result<Vec<u8>> {
    if !tensor.is_finite() {
        return Err(Error::NonFinite("tensor file payload".into()));
    }
    let mut out = Vec::with_capacity(encoded_len(tensor.shape(), precision));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&precision.version().to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Input(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match precision {
        Precision::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize), FormatError> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(FormatError::Truncated {
                expected: n,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));

    need(4)?;
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    need(12)?;
    let precision = Precision::from_version(word(4))?;
    let rank = word(8) as usize;
    if rank == 0 {
        return Err(FormatError::Malformed("rank 0".into()));
    }
    let header = rank
        .checked_mul(4)
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| FormatError::Malformed(format!("rank {rank}")))?;
    need(header)?;
    let dims: Vec<u32> = (0..rank).map(|i| word(12 + 4 * i)).collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|&n| n.checked_mul(precision.width()).is_some())
        .ok_or_else(|| FormatError::DimOverflow(dims.clone()))?;
    if dims.contains(&0) {
        return Err(FormatError::Malformed(format!("zero dimension in {dims:?}")));
    }
    let total = header
        .checked_add(numel * precision.width())
        .ok_or_else(|| FormatError::DimOverflow(dims.clone()))?;
    need(total)?;
    let payload = &bytes[header..total];
    let data: Vec<f64> = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let shape = dims.iter().map(|&d| d as usize).collect();
    Ok((Tensor::from_parts(shape, data), total))
}

/// Decodes a buffer that must contain exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - used));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, tensor: &Tensor, precision: Precision) -> Result<()> {
    let bytes = encode(tensor, precision)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Rounds every entry to the nearest `f32`, i.e. what a version 1 file keeps.
pub fn quantize_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}
