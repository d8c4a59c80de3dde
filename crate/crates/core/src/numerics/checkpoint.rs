//! Checkpoint serialization.
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic   b"HGCP"
//! version u32 (currently 1)
//! count   u32                    number of parameter groups
//! per group, in store iteration order (lexicographic by name):
//!   name_len  u32
//!   name      utf-8 bytes
//!   trainable u8 (0 or 1)
//!   ndim      u32
//!   dims      ndim x u32         product equals the value count
//!   data      product x f64      raw little-endian values
//! ```
//!
//! Optimizer moments are deliberately not stored; fine-tuning after a
//! restore starts Adam fresh.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::HgcpError;
use crate::numerics::store::ParamStore;
use crate::Result;

const MAGIC: &[u8; 4] = b"HGCP";
const VERSION: u32 = 1;

/// Write every group of `store` to `path`. Groups are stored flat
/// (ndim = 1) since the store does not track shapes.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, group) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[group.trainable as u8])?;
        w.write_all(&1u32.to_le_bytes())?; // ndim
        w.write_all(&(group.values.len() as u32).to_le_bytes())?;
        for v in &group.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back into a fresh store. Adam moments start at zero.
pub fn load(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(HgcpError::Config(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(HgcpError::Config(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| HgcpError::Config(format!("{}: non-utf8 group name", path.display())))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let trainable = flag[0] != 0;
        let ndim = read_u32(&mut r)? as usize;
        let mut n = 1usize;
        for _ in 0..ndim {
            n = n
                .checked_mul(read_u32(&mut r)? as usize)
                .ok_or_else(|| HgcpError::Config("checkpoint dims overflow".into()))?;
        }
        let mut values = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        store.register(&name, values, trainable)?;
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
