//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "LCCKPT01"
//! count    u32
//! index    count × { name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64),
//!                    ndim u32, dims u64 × ndim, offset u64 }
//! data     raw little-endian values; `offset` is relative to the data start
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LCCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("missing tensor {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> TensorStore {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        TensorStore { tensors }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &TensorStore) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut index = Vec::new();
        let mut data = Vec::new();
        index.extend_from_slice(MAGIC);
        index.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            index.extend_from_slice(&(name.len() as u32).to_le_bytes());
            index.extend_from_slice(name.as_bytes());
            index.push(dtype.code());
            index.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                index.extend_from_slice(&(d as u64).to_le_bytes());
            }
            index.extend_from_slice(&(data.len() as u64).to_le_bytes());
            match dtype {
                DType::F32 => t
                    .data()
                    .iter()
                    .for_each(|&v| data.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => t.data().iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            }
        }
        index.extend_from_slice(&data);
        index
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let dtype = match cur.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(format!("unknown dtype {other}")),
            };
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let offset = cur.u64()? as usize;
            entries.push((name, dtype, shape, offset));
        }
        let data = &bytes[cur.pos..];
        let mut store = TensorStore::new();
        for (name, dtype, shape, offset) in entries {
            let numel: usize = shape.iter().product();
            let end = offset + numel * dtype.width();
            let raw = data
                .get(offset..end)
                .ok_or_else(|| format!("tensor {name} truncated"))?;
            let values = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            };
            let t = Tensor::new(shape, values).map_err(|e| e.to_string())?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        std::fs::write(path, self.to_bytes(dtype))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| "unexpected end of file".to_string())?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
