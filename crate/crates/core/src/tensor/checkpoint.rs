//! Binary checkpoint format.
//!
//! ```text
//! "COLA"            4 bytes magic
//! version           u32
//! count             u32
//! count × entry:
//!   name_len        u32, then name_len bytes of UTF-8
//!   ndim            u32
//!   dims            ndim × u32
//!   payload         product(dims) × f32
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"COLA";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(&str, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let fail = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(fail)? != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = r.u32().map_err(fail)?;
    if version != VERSION {
        return Err(Error::Version(format!(
            "checkpoint format {version}, expected {VERSION}"
        )));
    }
    let count = r.u32().map_err(fail)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32().map_err(fail)? as usize;
        let name = std::str::from_utf8(r.take(n).map_err(fail)?)
            .map_err(|e| fail(format!("name is not UTF-8: {e}")))?
            .to_owned();
        let ndim = r.u32().map_err(fail)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32().map_err(fail)? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4).map_err(fail)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let entries: Vec<_> = store.iter().collect();
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(&entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf, path)
}

/// Loads a checkpoint into a store of the same layout.
pub fn load_into(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    store.load_named(load(path)?)
}
