//! Checkpoint files.
//!
//! ```text
//! 8 bytes   magic "MCKPT1\0\0"
//! u32       number of tensors
//! per tensor:
//!   u32     name length, then UTF-8 name
//!   u32     rank, then rank × u32 extents
//!   u64     byte offset of the tensor inside the data section
//! data      raw little-endian f32 values, tensors back to back
//! ```

use std::fs;
use std::path::Path;

use super::{NnError, ParamEntry, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCKPT1\0\0";

pub fn encode_checkpoint(params: &ParamSet<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for e in &params.entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * e.data.len() as u64;
    }
    for e in &params.entries {
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Malformed(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet<f32>, NnError> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NnError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 8 };
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| NnError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64()?;
        table.push((name, shape, offset));
    }
    let data = &bytes[r.pos..];
    let mut expected_offset = 0u64;
    let mut entries = Vec::with_capacity(table.len());
    for (name, shape, offset) in table {
        if offset != expected_offset {
            return Err(NnError::Malformed(format!("tensor {name} at offset {offset}, expected {expected_offset}")));
        }
        let len: usize = shape.iter().product();
        let start = offset as usize;
        let end = start + 4 * len;
        if end > data.len() {
            return Err(NnError::Malformed(format!("tensor {name} runs past the end of the file")));
        }
        let values = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        expected_offset = end as u64;
        entries.push(ParamEntry { name, shape, data: values });
    }
    if expected_offset as usize != data.len() {
        return Err(NnError::Malformed("trailing bytes after tensor data".into()));
    }
    Ok(ParamSet { entries })
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ParamSet<f32>) -> Result<(), NnError> {
    Ok(fs::write(path, encode_checkpoint(params))?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet<f32>, NnError> {
    decode_checkpoint(&fs::read(path)?)
}
