//! Tensor archive: the container behind model bundles and backbone weights.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic[4] | version u32 | meta_count u32 | (key str, value str)*
//! | tensor_count u32 | (name str, rank u32, dims u64*, crc32 u32)*
//! | f32 data of every tensor in manifest order | crc32 of all preceding bytes
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            values,
        }
    }

    fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in &self.values {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TensorEntry) {
        self.tensors.push(entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = (String, Vec<usize>, Vec<f32>)>) {
        self.tensors
            .extend(entries.into_iter().map(|(n, s, v)| TensorEntry::new(n, s, v)));
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.tensors
            .iter()
            .filter_map(|t| {
                t.name
                    .strip_prefix(prefix)
                    .map(|n| (n.to_string(), t.shape.clone(), t.values.clone()))
            })
            .collect()
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("archive lacks metadata key {key:?}")))
    }

    pub fn to_bytes(&self, magic: &[u8; 4]) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(magic);
        w.u32(ARCHIVE_VERSION);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.u32(t.checksum());
        }
        for t in &self.tensors {
            w.f32s(&t.values);
        }
        w.finish_with_checksum()
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic bytes, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = ByteReader::new(bytes, "tensor archive");
        r.take(4)?;
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: ARCHIVE_VERSION,
            });
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            meta.insert(k, v);
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let crc = r.u32()?;
            manifest.push((name, shape, crc));
        }
        let data_len: usize = manifest.iter().map(|(_, s, _)| s.iter().product::<usize>() * 4).sum();
        let expected = bytes.len() - r.remaining() + data_len + 4;
        if bytes.len() < expected {
            return Err(Error::Truncated(format!(
                "tensor archive is {} bytes, manifest requires {expected}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - expected)));
        }
        ByteReader::with_checksum(bytes, "tensor archive")?;
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape, crc) in manifest {
            let len = shape.iter().product();
            let entry = TensorEntry::new(name, shape, r.f32s(len)?);
            if entry.checksum() != crc {
                return Err(Error::Checksum(format!("tensor {} is corrupt", entry.name)));
            }
            tensors.push(entry);
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path, magic: &[u8; 4]) -> Result<()> {
        fs::write(path, self.to_bytes(magic)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic)
    }
}
