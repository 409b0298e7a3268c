//! Portable tensor archive.
//!
//! Layout:
//!
//! ```text
//! 0..8         magic  b"USTARCH1"
//! 8..16        manifest length M, u64 little-endian
//! 16..16+M     manifest, UTF-8 JSON
//! 16+M..       data region: little-endian IEEE-754 float32 buffers,
//!              concatenated; manifest offsets are relative to this region
//! ```
//!
//! The manifest is `{"format", "version", "arrays": [{name, shape, dtype,
//! offset, length}], "meta": {...}}` where `length` is in bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"USTARCH1";
const FORMAT: &str = "unitsurgeon-tensor-archive";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    arrays: Vec<ManifestEntry>,
    #[serde(default)]
    meta: Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: Value,
    arrays: Vec<NamedArray>,
}

impl TensorArchive {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Archive(format!(
                "array {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Archive(format!("duplicate array name {name}")));
        }
        self.arrays.push(NamedArray {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let a = self
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing array {name}")))?;
        if a.shape != shape {
            return Err(Error::Archive(format!(
                "array {name}: expected shape {shape:?}, found {:?}",
                a.shape
            )));
        }
        Ok(&a.data)
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let length = 4 * a.data.len() as u64;
                let e = ManifestEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    dtype: "float32".into(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            format: FORMAT.into(),
            version: VERSION,
            arrays: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(mlen)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| Error::Archive("manifest length exceeds file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::Archive(format!("manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Archive(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let data = &bytes[data_start..];
        let mut archive = TensorArchive::new(manifest.meta);
        for e in manifest.arrays {
            if e.dtype != "float32" {
                return Err(Error::Archive(format!("array {}: dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            if e.length != 4 * count as u64 {
                return Err(Error::Archive(format!(
                    "array {}: {} bytes declared for shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let start = e.offset as usize;
            let end = start
                .checked_add(e.length as usize)
                .filter(|end| *end <= data.len())
                .ok_or_else(|| Error::Archive(format!("array {} out of bounds", e.name)))?;
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            archive.push(e.name, &e.shape, values)?;
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
