//! Versioned binary serialization of a [`ParamStore`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "A2CKPT\0\0"
//! version  u32
//! step     u64
//! meta     u64 length + UTF-8 bytes
//! count    u32
//! entry*   name (u32 length + UTF-8), kind u8 (0 trainable, 1 buffer),
//!          rank u32, dims u64*rank, values f64*product(dims) as raw bits
//! ```
//!
//! Values are stored as raw IEEE-754 bits so a save/load cycle is bitwise exact.
//! Optimizer moments are not persisted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"A2CKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, meta: &str) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&store.step_count().to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, kind, value) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[match kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        }])?;
        w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in value.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back as a fresh store plus its metadata string.
/// The optimizer step counter is not restored.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, String)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let _step = read_u64(&mut r)?;
    let meta_len = read_u64(&mut r)? as usize;
    let meta = read_string(&mut r, meta_len)?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("entry {name}: {e}")))?;
        match kind[0] {
            0 => store.add(name, tensor)?,
            1 => store.add_buffer(name, tensor)?,
            k => return Err(Error::Format(format!("entry {name}: unknown kind {k}"))),
        };
    }
    Ok((store, meta))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &str) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), store, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
}
