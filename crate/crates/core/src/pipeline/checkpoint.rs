//! `ECGC` checkpoint container.
//!
//! Layout (little-endian): magic `ECGC`, version `u32`, config length `u32`,
//! config JSON, parameter count `u32`, then per parameter a name length
//! `u32`, the UTF-8 name and the value as a 64-bit tensor record.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::datagen::tensor_file::{decode_prefix, encode, Precision};
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ECGC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_len(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_len(&mut out, model.params.len())?;
    for (_, p) in model.params.iter() {
        put_len(&mut out, p.name().len())?;
        out.extend_from_slice(p.name().as_bytes());
        out.extend(encode(p.value(), Precision::F64)?);
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n)
        .map_err(|_| Error::Config(format!("length {n} does not fit the checkpoint format")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        }
        .into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| FormatError::Malformed(format!("config record: {e}")))?;
    let mut model = Model::new(config)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(FormatError::Malformed(format!(
            "{count} parameters stored, configuration defines {}",
            model.params.len()
        ))
        .into());
    }
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let (tensor, used) = decode_prefix(&bytes[r.pos..])?;
        r.pos += used;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| FormatError::Malformed(format!("unknown parameter {name:?}")))?;
        if tensor.shape() != model.params.value(id).shape() {
            return Err(FormatError::Malformed(format!(
                "parameter {name:?} has shape {:?}, expected {:?}",
                tensor.shape(),
                model.params.value(id).shape()
            ))
            .into());
        }
        model.params.set_value(id, tensor)?;
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
    }
    Ok(model)
}

/// Writes via a temporary file and rename, so an interrupted save never
/// replaces a good checkpoint.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
