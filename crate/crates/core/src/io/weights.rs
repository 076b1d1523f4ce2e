//! Binary tensor archive: `CMKW`, u32 version, u32 entry count, then per
//! entry a u32 name length, UTF-8 name, u32 rank, u64 extents and f32
//! values. Integers and floats are little-endian.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMKW";
pub const VERSION: u32 = 1;

pub fn write_weights<W: Write>(mut w: W, entries: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let mut seen = HashSet::new();
    for (name, _) in entries {
        if !seen.insert(*name) {
            return Err(Error::Weights(format!("duplicate entry {name:?}")));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads every entry in file order.
pub fn read_weights<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(Error::Weights(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, "header")?;
    if version != VERSION {
        return Err(Error::Weights(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "header")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for i in 0..count {
        let ctx = format!("entry {i}");
        let len = read_u32(&mut r, &ctx)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name, &ctx)?;
        let name = String::from_utf8(name).map_err(|_| Error::Weights(format!("{ctx}: name is not UTF-8")))?;
        let ctx = format!("entry {i} ({name})");
        let rank = read_u32(&mut r, &ctx)? as usize;
        if rank > 8 {
            return Err(Error::Weights(format!("{ctx}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, &ctx)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| Error::Weights(format!("{ctx}: extents {shape:?} too large")))?;
        let mut raw = vec![0u8; numel * 4];
        read_exact(&mut r, &mut raw, &ctx)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(Error::Weights(format!("duplicate entry {name:?}")));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_entries(path: &Path, entries: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    write_weights(BufWriter::new(f), entries)
}

pub fn load_entries(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    read_weights(BufReader::new(f))
}

pub fn save_params(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let entries: Vec<(&str, &Tensor<f32>)> = store.iter().map(|(_, n, t)| (n, t)).collect();
    save_entries(path, &entries)
}

/// Copies `entries` into `store`. Every stored name must be present with a
/// matching shape and no entry may be left over.
pub fn assign_params(store: &mut ParamStore<f32>, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut unknown = Vec::new();
    let mut filled = vec![false; store.count()];
    let mut incoming = Vec::new();
    for (name, t) in entries {
        match store.id(&name) {
            None => unknown.push(name),
            Some(id) => {
                let want = store.get(id).shape();
                if want != t.shape() {
                    return Err(Error::Weights(format!(
                        "{name}: stored shape {:?}, model expects {want:?}",
                        t.shape()
                    )));
                }
                filled[id.index()] = true;
                incoming.push((id, t));
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Weights(format!("unknown entries: {}", unknown.join(", "))));
    }
    let missing: Vec<&str> = store
        .iter()
        .filter(|(id, _, _)| !filled[id.index()])
        .map(|(_, n, _)| n)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Weights(format!("missing entries: {}", missing.join(", "))));
    }
    for (id, t) in incoming {
        *store.get_mut(id) = t;
    }
    Ok(())
}

pub fn load_params(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    assign_params(store, load_entries(path)?)
}
