//! Named parameter sets and their binary file format.
//!
//! Layout: the ASCII magic `FNET1`, then per parameter the name length (u32
//! LE), the UTF-8 name, the rank (u32 LE), each dim (u32 LE) and the raw
//! little-endian f32 values. Parameters are written in name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Result, Scalar, Tensor, TensorError};

pub const PARAM_MAGIC: &[u8; 5] = b"FNET1";

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Merges `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.entries.extend(other.entries);
    }
}

pub fn write_params<W: Write>(params: &ParamStore<f32>, mut out: W) -> Result<()> {
    out.write_all(PARAM_MAGIC)?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::BadFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn read_params<R: Read>(mut input: R) -> Result<ParamStore<f32>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < PARAM_MAGIC.len() || &bytes[..PARAM_MAGIC.len()] != PARAM_MAGIC {
        return Err(TensorError::BadFormat("missing FNET1 magic".into()));
    }
    let mut cur = Cursor {
        bytes: &bytes,
        pos: PARAM_MAGIC.len(),
    };
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| TensorError::BadFormat("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()?;
        let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n.checked_mul(4).ok_or_else(|| TensorError::BadFormat("oversized tensor".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| TensorError::BadFormat(e.to_string()))?;
        if store.get(&name).is_some() {
            return Err(TensorError::BadFormat(format!("duplicate parameter {name:?}")));
        }
        store.insert(name, t);
    }
    Ok(store)
}
