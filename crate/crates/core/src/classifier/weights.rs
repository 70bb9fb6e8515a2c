//! `.tmcw` weight files.
//!
//! Little-endian layout: magic `TMCW`, version `u32`, tensor count `u32`,
//! then per tensor a `u16` name length, the UTF-8 name, dtype `u8` (0 for
//! f32), rank `u8`, `rank` dims as `u32` and the raw values. A CRC32 of all
//! preceding bytes closes the file.

use std::path::Path;

use super::model::{tensor_shapes, CnnModel, DEFAULT_DROPOUT, TENSOR_NAMES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TMCW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
/// Input side of every model stored on disk.
pub const PATCH_INPUT_SIDE: usize = 50;

pub fn encode_weights(model: &CnnModel<f32>) -> Vec<u8> {
    let shapes = tensor_shapes();
    let mut out = Vec::with_capacity(model.parameter_count() * 4 + 512);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for ((name, dims), values) in TENSOR_NAMES.iter().zip(&shapes).zip(model.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_weights(model: &CnnModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_weights(model))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<CnnModel<f32>> {
    decode_weights(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<CnnModel<f32>> {
    if bytes.len() < 4 {
        return Err(format_err(0, "truncated while reading magic"));
    }
    // the trailing CRC is excluded from the tensor stream
    let body_len = bytes.len().saturating_sub(4).max(4);
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let count_at = r.pos;
    let count = r.u32("tensor count")? as usize;
    let shapes = tensor_shapes();
    if count != shapes.len() {
        return Err(format_err(count_at, format!("expected {} tensors, found {count}", shapes.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (expected, dims) in TENSOR_NAMES.iter().zip(&shapes) {
        let start = r.pos;
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| format_err(start + 2, "tensor name is not UTF-8"))?
            .to_owned();
        if name != *expected {
            return Err(format_err(start, format!("expected tensor {expected}, found {name}")));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(format_err(r.pos - 1, format!("tensor {name}: unsupported dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut declared = Vec::with_capacity(rank);
        for _ in 0..rank {
            declared.push(r.u32("dims")? as usize);
        }
        if declared != *dims {
            return Err(format_err(start, format!("tensor {name}: dims {declared:?}, expected {dims:?}")));
        }
        let n: usize = declared.iter().product();
        let raw = r
            .take(n * 4, "values")
            .map_err(|_| format_err(r.pos, format!("tensor {name}: declares {n} values but the file ends early")))?;
        tensors.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    if r.pos != body_len || bytes.len() != body_len + 4 {
        return Err(format_err(r.pos, "unexpected bytes after the last tensor"));
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_len]) != stored {
        return Err(format_err(body_len, "checksum mismatch"));
    }
    CnnModel::from_tensors(PATCH_INPUT_SIDE, DEFAULT_DROPOUT, tensors)
}
