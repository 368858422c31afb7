//! Versioned binary container shared by every on-disk artifact.
//!
//! Layout: the 8-byte magic `ICLVCBIN`, a little-endian `u32` header length,
//! the UTF-8 JSON header, then the raw little-endian array payloads in header
//! order. The header carries the artifact kind, its format version, free-form
//! metadata and one descriptor (name, dtype, shape) per array.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ICLVCBIN";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    fn elem_size(dtype: &str) -> Option<usize> {
        match dtype {
            "f32" | "u32" => Some(4),
            "f64" => Some(8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct ArrayDescriptor {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    format_version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub format_version: u32,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(kind: &str, format_version: u32, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            format_version,
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: ArrayData) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("container array", expected, data.len()));
        }
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::invalid(format!("duplicate array name {name}")));
        }
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn push_matrix_f64(&mut self, name: &str, m: &Array2<f64>) -> Result<()> {
        let data = m.iter().copied().collect();
        self.push(name, vec![m.nrows(), m.ncols()], ArrayData::F64(data))
    }

    pub fn push_matrix_f32(&mut self, name: &str, m: &Array2<f32>) -> Result<()> {
        let data = m.iter().copied().collect();
        self.push(name, vec![m.nrows(), m.ncols()], ArrayData::F32(data))
    }

    pub fn push_vec_f64(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.push(name, vec![v.len()], ArrayData::F64(v.to_vec()))
    }

    pub fn push_vec_u32(&mut self, name: &str, v: &[u32]) -> Result<()> {
        self.push(name, vec![v.len()], ArrayData::U32(v.to_vec()))
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| self.format_err(format!("missing array {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    /// Reads a rank-2 array, widening `f32` payloads.
    pub fn matrix_f64(&self, name: &str) -> Result<Array2<f64>> {
        let a = self.get(name)?;
        if a.shape.len() != 2 {
            return Err(self.format_err(format!("{name} is not rank 2")));
        }
        let data: Vec<f64> = match &a.data {
            ArrayData::F64(v) => v.clone(),
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::U32(_) => return Err(self.format_err(format!("{name} is not float"))),
        };
        Array2::from_shape_vec((a.shape[0], a.shape[1]), data)
            .map_err(|e| self.format_err(e.to_string()))
    }

    pub fn matrix_f32(&self, name: &str) -> Result<Array2<f32>> {
        let a = self.get(name)?;
        match (&a.data, a.shape.as_slice()) {
            (ArrayData::F32(v), &[r, c]) => Array2::from_shape_vec((r, c), v.clone())
                .map_err(|e| self.format_err(e.to_string())),
            _ => Err(self.format_err(format!("{name} is not a rank-2 f32 array"))),
        }
    }

    pub fn vec_f64(&self, name: &str) -> Result<Vec<f64>> {
        match &self.get(name)?.data {
            ArrayData::F64(v) => Ok(v.clone()),
            ArrayData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            ArrayData::U32(_) => Err(self.format_err(format!("{name} is not float"))),
        }
    }

    pub fn vec_u32(&self, name: &str) -> Result<Vec<u32>> {
        match &self.get(name)?.data {
            ArrayData::U32(v) => Ok(v.clone()),
            _ => Err(self.format_err(format!("{name} is not u32"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            format_version: self.format_version,
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayDescriptor {
                    name: a.name.clone(),
                    dtype: a.data.dtype().to_string(),
                    shape: a.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            match &a.data {
                ArrayData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            kind: "container".into(),
            reason: reason.into(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 12 + hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for d in header.arrays {
            let n: usize = d.shape.iter().product();
            let size = ArrayData::elem_size(&d.dtype).ok_or_else(|| bad("unknown dtype"))?;
            let raw = bytes
                .get(pos..pos + n * size)
                .ok_or_else(|| bad("truncated payload"))?;
            pos += n * size;
            let data = match d.dtype.as_str() {
                "f32" => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                "f64" => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => ArrayData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            arrays.push(NamedArray {
                name: d.name,
                shape: d.shape,
                data,
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            kind: header.kind,
            format_version: header.format_version,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a half-written file at `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads a container and checks its kind and format version.
    pub fn read(path: &Path, kind: &str, version: u32) -> Result<Self> {
        let c = Self::from_bytes(&fs::read(path)?)?;
        c.expect(kind, version)?;
        Ok(c)
    }

    pub fn expect(&self, kind: &str, version: u32) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format {
                kind: kind.into(),
                reason: format!("file holds a {} artifact", self.kind),
            });
        }
        if self.format_version != version {
            return Err(Error::VersionMismatch {
                kind: kind.into(),
                expected: version,
                found: self.format_version,
            });
        }
        Ok(())
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| self.format_err(format!("missing meta field {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    fn format_err(&self, reason: String) -> Error {
        Error::Format {
            kind: self.kind.clone(),
            reason,
        }
    }
}
