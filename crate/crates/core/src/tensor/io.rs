//! Binary tensor files and the manifest that groups them.
//!
//! Layout of one tensor file, all integers little-endian:
//! `b"MOMA"`, version `u16`, rank `u16`, `rank × u64` dims, then the `f64` data row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MOMA";
pub const TENSOR_VERSION: u16 = 1;

pub fn write_tensor(mut w: impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    let rank = u16::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds u16".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(mut r: impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut two = [0u8; 2];
    r.read_exact(&mut two)?;
    let version = u16::from_le_bytes(two);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    r.read_exact(&mut two)?;
    let rank = u16::from_le_bytes(two) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut eight = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut eight)?;
        shape.push(u64::from_le_bytes(eight) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 8];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    /// `frozen` or `trainable`.
    pub role: String,
    pub file: String,
}

/// Tab-separated `name role file` lines; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::from("# moma manifest v1\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.name, e.role, e.file));
        }
        out
    }

    pub fn parse(src: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, role, file] = fields[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 3 fields", n + 1)));
            };
            entries.push(ManifestEntry { name: name.into(), role: role.into(), file: file.into() });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
