//! Flat binary parameter container: magic, version, count, then per tensor
//! (name length, name, rank, extents, little-endian f64 values). Round-trips
//! bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HACDCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &extent in tensor.shape() {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &v in tensor.values().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Parsed checkpoint entry: name, extents, values.
pub type CheckpointEntry = (String, Vec<usize>, Vec<f64>);

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = cursor.take(8)?;
    if magic != MAGIC {
        return Err(cursor.err("bad magic"));
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(cursor.err(&format!("unsupported checkpoint version {}", version)));
    }
    let count = cursor.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cursor.u32()? as usize;
        let name_bytes = cursor.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| cursor.err("tensor name is not UTF-8"))?
            .to_string();
        let rank = cursor.u32()? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(cursor.u64()? as usize);
        }
        let numel: usize = extents.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f64::from_le_bytes(cursor.take(8)?.try_into().unwrap()));
        }
        entries.push((name, extents, values));
    }
    if cursor.pos != bytes.len() {
        return Err(cursor.err("trailing bytes after last tensor"));
    }
    Ok(entries)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn err(&self, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            line: 0,
            message: format!("{} (at byte {})", message, self.pos),
        }
    }
}
