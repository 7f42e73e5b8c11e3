//! Flat little-endian binary container shared by adapters and backbones.
//!
//! Layout: magic `ALAB`, one format-version byte, a u64 header length and that
//! many u64 header words, a u64 tensor count, then for each tensor (in
//! name-sorted order) its name, rank, dims and f64 data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{LabError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ALAB";
pub const FORMAT_VERSION: u8 = 1;

/// Sanity bound so a corrupt length word cannot trigger a huge allocation.
const MAX_WORDS: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<u64>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> LabError {
    LabError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_to<W: Write>(mut w: W, header: &[u64], tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    for h in header {
        w.write_all(&h.to_le_bytes())?;
    }
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save(path: &Path, header: &[u64], tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_to(BufWriter::new(File::create(path)?), header, tensors)
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| fmt_err(path, format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<usize> {
    let n = read_u64(r, path)?;
    if n > MAX_WORDS {
        return Err(fmt_err(path, format!("implausible {what} {n}")));
    }
    Ok(n as usize)
}

pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Checkpoint> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| fmt_err(path, "missing header"))?;
    if &magic[..4] != MAGIC {
        return Err(fmt_err(path, "bad magic"));
    }
    if magic[4] != FORMAT_VERSION {
        return Err(fmt_err(path, format!("unsupported format version {}", magic[4])));
    }
    let nh = read_len(&mut r, path, "header length")?;
    let header = (0..nh)
        .map(|_| read_u64(&mut r, path))
        .collect::<Result<Vec<_>>>()?;
    let nt = read_len(&mut r, path, "tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..nt {
        let nl = read_len(&mut r, path, "name length")?;
        let mut name = vec![0u8; nl];
        r.read_exact(&mut name)
            .map_err(|_| fmt_err(path, "truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| fmt_err(path, "name is not UTF-8"))?;
        let rank = read_len(&mut r, path, "rank")?;
        let shape = (0..rank)
            .map(|_| read_len(&mut r, path, "dim"))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r, path)?));
        }
        let t = Tensor::new(&shape, data).map_err(|e| fmt_err(path, e.to_string()))?;
        tensors.insert(name, t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fmt_err(path, "trailing bytes"));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    read_from(BufReader::new(File::open(path)?), path)
}
