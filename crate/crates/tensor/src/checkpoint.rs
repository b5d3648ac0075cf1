//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!   magic "TGCL" | version u32 | count u32 | count x tensor record
//! tensor record:
//!   name_len u32 | name utf-8 | rank u32 | rank x dim u64 | numel x f32
//!
//! Writing iterates the store in name order, so the same store always
//! produces the same bytes and round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::numel;

pub const MAGIC: &[u8; 4] = b"TGCL";
pub const VERSION: u32 = 1;

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = read_u32(&mut r, path)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, path)?;
        let name = String::from_utf8(name_buf).map_err(|_| {
            TensorError::Checkpoint(format!("{}: non-utf8 tensor name", path.display()))
        })?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut dim = [0u8; 8];
            read_exact(&mut r, &mut dim, path)?;
            shape.push(u64::from_le_bytes(dim) as usize);
        }
        let n = numel(&shape);
        let mut raw = vec![0u8; n * 4];
        read_exact(&mut r, &mut raw, path)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&name, shape, data)?;
    }
    // anything after the last record is corruption
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(TensorError::Checkpoint(format!(
            "{}: trailing bytes after final tensor",
            path.display()
        )));
    }
    Ok(store)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        TensorError::Checkpoint(format!("{}: truncated checkpoint", path.display()))
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}
