//! Flat parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "SPCK"            4 bytes
//! version u8                currently 1
//! count   u32               number of entries
//! entry*  name_len u32, name (UTF-8), ndim u32, dims u32 × ndim,
//!         payload f32 × product(dims)
//! ```
//!
//! Entries are written in sorted path order, so equal archives are byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"SPCK";
pub const ARCHIVE_VERSION: u8 = 1;

pub type Archive = BTreeMap<String, Tensor>;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

pub fn write_archive<W: Write>(mut w: W, archive: &Archive) -> Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&[ARCHIVE_VERSION])?;
    w.write_all(&(archive.len() as u32).to_le_bytes())?;
    for (name, t) in archive {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| format_err("truncated archive"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Archive> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("truncated header"))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)
        .map_err(|_| format_err("truncated header"))?;
    if version[0] != ARCHIVE_VERSION {
        return Err(format_err(format!("unsupported version {}", version[0])));
    }
    let count = read_u32(&mut r)?;
    let mut out = Archive::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| format_err("truncated entry name"))?;
        let name = String::from_utf8(name).map_err(|_| format_err("entry name is not UTF-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)
            .map_err(|_| format_err(format!("truncated payload for `{name}`")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(format_err(format!("duplicate entry `{name}`")));
        }
    }
    Ok(out)
}

pub fn write_archive_file(path: impl AsRef<Path>, archive: &Archive) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_archive(&mut buf, archive)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_archive_file(path: impl AsRef<Path>) -> Result<Archive> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_archive(bytes.as_slice())
}
