//! Name-indexed tensor archive.
//!
//! ```text
//! magic      8 bytes  "BEATPARM"
//! version    u32 LE
//! meta_len   u32 LE, followed by meta_len bytes of UTF-8 (JSON, may be empty)
//! count      u32 LE
//! count × { name_len u32, name bytes, ndim u32, ndim × u64 dims, numel × f64 }
//! ```
//! All integers and floats are little-endian; tensors are row-major and
//! written in name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::binio::Cursor;
use crate::error::Result;
use crate::FORMAT_VERSION;

const MAGIC: &[u8; 8] = b"BEATPARM";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: String,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(archive.meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(archive.meta.as_bytes());
    buf.extend_from_slice(&(archive.tensors.len() as u32).to_le_bytes());
    for (name, t) in &archive.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor::new(&bytes, path, "parameter archive");
    c.magic(MAGIC)?;
    c.version()?;
    let meta_len = c.u32()? as usize;
    let meta = c.string(meta_len)?;
    let count = c.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.string(name_len)?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = c.f64s(numel)?;
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    c.finish()?;
    Ok(Archive { meta, tensors })
}
