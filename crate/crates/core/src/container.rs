//! `TCN1` tensor container: a table of named, typed, shaped tensors followed by
//! a little-endian payload.
//!
//! Layout: magic `TCN1`, `u16` version, `u32` entry count, then per entry a
//! `u16` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = f64), `u8` rank,
//! `u32` dims, `u64` payload offset and `u64` byte length. Offsets are relative
//! to the start of the payload.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TCN1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: not a TCN1 container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("truncated container: {0}")]
    Truncated(&'static str),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("tensor `{name}`: {reason}")]
    Layout { name: String, reason: String },
    #[error("duplicate tensor name `{0}`")]
    Duplicate(String),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has {found}, expected {expected}")]
    Mismatch {
        name: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }
    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: TensorData::F32(data),
        }
    }
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: TensorData::F64(data),
        }
    }
    pub fn from_array2(a: &Array2<f64>) -> Self {
        Tensor::f64(vec![a.nrows(), a.ncols()], a.iter().copied().collect())
    }
    pub fn from_array1(a: &Array1<f64>) -> Self {
        Tensor::f64(vec![a.len()], a.to_vec())
    }
    pub fn from_slice(v: &[f64]) -> Self {
        Tensor::f64(vec![v.len()], v.to_vec())
    }
}

/// Ordered set of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), ContainerError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ContainerError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Moves every tensor of `other` in under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: TensorContainer) -> Result<(), ContainerError> {
        for (n, t) in other.entries {
            self.insert(format!("{prefix}{n}"), t)?;
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> TensorContainer {
        let mut out = TensorContainer::new();
        for (n, t) in &self.entries {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone()).expect("names are unique");
            }
        }
        out
    }

    pub fn f64_vec(&self, name: &str) -> Result<Vec<f64>, ContainerError> {
        match &self.get(name)?.data {
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
        }
    }

    pub fn array1(&self, name: &str) -> Result<Array1<f64>, ContainerError> {
        let t = self.get(name)?;
        if t.shape.len() != 1 {
            return Err(self.mismatch(name, "rank 1", t));
        }
        Ok(Array1::from(self.f64_vec(name)?))
    }

    pub fn array2(&self, name: &str) -> Result<Array2<f64>, ContainerError> {
        let t = self.get(name)?;
        if t.shape.len() != 2 {
            return Err(self.mismatch(name, "rank 2", t));
        }
        Ok(Array2::from_shape_vec((t.shape[0], t.shape[1]), self.f64_vec(name)?)
            .expect("shape checked on construction"))
    }

    /// A scalar stored as a one-element tensor.
    pub fn scalar(&self, name: &str) -> Result<f64, ContainerError> {
        let v = self.f64_vec(name)?;
        if v.len() != 1 {
            return Err(self.mismatch(name, "one element", self.get(name)?));
        }
        Ok(v[0])
    }

    pub fn usize_scalar(&self, name: &str) -> Result<usize, ContainerError> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(ContainerError::Mismatch {
                name: name.into(),
                expected: "a non-negative integer".into(),
                found: v.to_string(),
            });
        }
        Ok(v as usize)
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) -> Result<(), ContainerError> {
        self.insert(name, Tensor::f64(vec![1], vec![v]))
    }

    fn mismatch(&self, name: &str, expected: &str, t: &Tensor) -> ContainerError {
        ContainerError::Mismatch {
            name: name.into(),
            expected: expected.into(),
            found: format!("{} {:?}", t.data.dtype_name(), t.shape),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            let width = if t.data.code() == 0 { 4 } else { 8 };
            let bytes = (t.data.len() * width) as u64;
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&bytes.to_le_bytes());
            offset += bytes;
        }
        for (_, t) in &self.entries {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(ContainerError::Version(version));
        }
        let count = u32::from_le_bytes(r.array("entry count")?) as usize;
        struct Entry {
            name: String,
            code: u8,
            shape: Vec<usize>,
            offset: u64,
            len: u64,
        }
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = String::from_utf8(r.take(nlen, "name")?.to_vec()).map_err(|_| ContainerError::Layout {
                name: "?".into(),
                reason: "name is not UTF-8".into(),
            })?;
            let code = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array("shape")?) as usize);
            }
            let offset = u64::from_le_bytes(r.array("offset")?);
            let len = u64::from_le_bytes(r.array("byte length")?);
            table.push(Entry {
                name,
                code,
                shape,
                offset,
                len,
            });
        }
        let payload = &bytes[r.pos..];
        let layout = |name: &str, reason: String| ContainerError::Layout {
            name: name.to_string(),
            reason,
        };
        let mut spans: Vec<(u64, u64, usize)> = Vec::with_capacity(table.len());
        for (i, e) in table.iter().enumerate() {
            let width = match e.code {
                0 => 4u64,
                1 => 8,
                c => return Err(ContainerError::DType(c)),
            };
            let elems = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| layout(&e.name, "shape overflows".into()))?;
            if elems.checked_mul(width) != Some(e.len) {
                return Err(layout(
                    &e.name,
                    format!("declared {} bytes but shape {:?} needs {}", e.len, e.shape, elems * width),
                ));
            }
            let end = e
                .offset
                .checked_add(e.len)
                .ok_or_else(|| layout(&e.name, "offset overflows".into()))?;
            if end > payload.len() as u64 {
                return Err(layout(
                    &e.name,
                    format!("span {}..{} exceeds payload of {} bytes", e.offset, end, payload.len()),
                ));
            }
            spans.push((e.offset, end, i));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(layout(
                    &table[w[1].2].name,
                    format!("overlaps `{}`", table[w[0].2].name),
                ));
            }
        }
        let mut out = TensorContainer::new();
        for e in table {
            let raw = &payload[e.offset as usize..(e.offset + e.len) as usize];
            let data = if e.code == 0 {
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            } else {
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            };
            out.insert(e.name, Tensor { shape: e.shape, data })?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(ContainerError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], ContainerError> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
}
