//! Binary checkpoint I/O for a [`ParamStore`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "GVLMCKPT"
//! version  u32      currently 1
//! count    u32      number of entries
//! entry*   repeated `count` times, in store insertion order:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   trainable  u8 (0 or 1)
//!   ndim       u32
//!   dims       ndim × u64
//!   data       prod(dims) × f64, row-major
//! ```
//!
//! Floats are written bit-for-bit, so save → load round-trips are exact and
//! a reloaded model reproduces its metrics bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GVLMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor, trainable) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(trainable)])?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Corrupt(format!("entry {i}: name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt(format!("entry {i}: name is not UTF-8")))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let trainable = match flag[0] {
            0 => false,
            1 => true,
            other => {
                return Err(CheckpointError::Corrupt(format!(
                    "entry {i} (`{name}`): trainable flag {other}"
                )))
            }
        };
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Corrupt(format!("entry {i} (`{name}`): {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || numel > 100_000_000 {
            return Err(CheckpointError::Corrupt(format!(
                "entry {i} (`{name}`): implausible element count {numel}"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("entry {i} (`{name}`): {e}")))?;
        store
            .insert(&name, tensor, trainable)
            .map_err(|e| CheckpointError::Corrupt(format!("entry {i}: {e}")))?;
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
