//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"NCKPT\0\0\x01"
//! u32     config hash length, then that many UTF-8 bytes
//! u32     parameter count
//! repeat:
//!   u32   name length, name bytes (UTF-8)
//!   u32   rank, then rank x u64 dims
//!   f64   values, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::NumError;

const MAGIC: &[u8; 8] = b"NCKPT\0\0\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ParamStore,
}

pub fn write_to<W: Write>(mut w: W, params: &ParamStore, config_hash: &str) -> Result<(), NumError> {
    w.write_all(MAGIC)?;
    write_str(&mut w, config_hash)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        write_str(&mut w, name)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint, NumError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumError::Format("not a checkpoint file (bad magic)".into()));
    }
    let config_hash = read_str(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 16 {
            return Err(NumError::Format(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.insert(&name, Tensor::new(&shape, data)?)?;
    }
    Ok(Checkpoint { config_hash, params })
}

pub fn save(path: &Path, params: &ParamStore, config_hash: &str) -> Result<(), NumError> {
    let mut buf = Vec::new();
    write_to(&mut buf, params, config_hash)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, NumError> {
    let bytes = std::fs::read(path)?;
    read_from(bytes.as_slice())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<(), NumError> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, NumError> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(NumError::Format(format!("string length {n} too large")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| NumError::Format(e.to_string()))
}
