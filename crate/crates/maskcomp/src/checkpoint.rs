//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "MCKP" | version u32 | count u32
//! per tensor:
//!   name_len u16 | name bytes | dtype u8 | rank u8 | extents u64[rank] | raw values
//! ```
//!
//! Round-trips are bit-exact: values are stored as their IEEE bytes, never
//! reformatted. Entries keep insertion order so a rewritten file is
//! byte-identical to its source.

use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("file ends inside `{0}`")]
    Truncated(String),
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("no tensor named `{0}` in checkpoint")]
    Missing(String),
    #[error("tensor `{0}` has a different dtype than requested")]
    WrongDtype(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// One stored tensor, either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Entry {
    fn dtype(&self) -> DType {
        match self {
            Entry::F32(_) => DType::F32,
            Entry::F64(_) => DType::F64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
        }
    }
}

pub trait IntoEntry {
    fn into_entry(self) -> Entry;
    fn from_entry(e: &Entry) -> Option<&Self>;
}

impl IntoEntry for Tensor<f32> {
    fn into_entry(self) -> Entry {
        Entry::F32(self)
    }
    fn from_entry(e: &Entry) -> Option<&Tensor<f32>> {
        match e {
            Entry::F32(t) => Some(t),
            Entry::F64(_) => None,
        }
    }
}

impl IntoEntry for Tensor<f64> {
    fn into_entry(self) -> Entry {
        Entry::F64(self)
    }
    fn from_entry(e: &Entry) -> Option<&Tensor<f64>> {
        match e {
            Entry::F64(t) => Some(t),
            Entry::F32(_) => None,
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: Tensor<T>)
    where
        Tensor<T>: IntoEntry,
    {
        self.entries.push((name.into(), tensor.into_entry()));
    }

    /// Stores a named scalar (rank-0 f64); used for header metadata such as
    /// stream segment lengths and model dimensions.
    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(name, Tensor::<f64>::scalar(value));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<&Tensor<T>>
    where
        Tensor<T>: IntoEntry,
    {
        let entry = self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        Tensor::<T>::from_entry(entry).ok_or_else(|| CheckpointError::WrongDtype(name.to_string()))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get::<f64>(name)?.data()[0])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.dtype() as u8);
            let shape = entry.shape();
            out.push(shape.len() as u8);
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match entry {
                Entry::F32(t) => {
                    for &v in t.data() {
                        v.write_le(&mut out);
                    }
                }
                Entry::F64(t) => {
                    for &v in t.data() {
                        v.write_le(&mut out);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = u32::from_le_bytes(r.take(4, "count")?.try_into().unwrap());
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag).ok_or(CheckpointError::BadDtype(tag))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8, "extent")?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let entry = match dtype {
                DType::F32 => {
                    let raw = r.take(n * 4, &name)?;
                    let data = raw.chunks_exact(4).map(f32::read_le).collect();
                    Entry::F32(Tensor::new(shape, data).expect("shape implied length"))
                }
                DType::F64 => {
                    let raw = r.take(n * 8, &name)?;
                    let data = raw.chunks_exact(8).map(f64::read_le).collect();
                    Entry::F64(Tensor::new(shape, data).expect("shape implied length"))
                }
            };
            entries.push((name, entry));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new();
        ck.push(
            "w",
            Tensor::<f32>::new(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 0.1])
                .unwrap(),
        );
        ck.push(
            "b",
            Tensor::<f64>::new(vec![2], vec![std::f64::consts::PI, 1e-300]).unwrap(),
        );
        ck.push_scalar("meta.len_text", 4.0);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let w = back.get::<f32>("w").unwrap();
        for (a, b) in w.data().iter().zip(ck.get::<f32>("w").unwrap().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.get_scalar("meta.len_text").unwrap(), 4.0);
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(matches!(
            Checkpoint::from_bytes(b"PNG\x0dxxxxxxxx"),
            Err(CheckpointError::BadMagic)
        ));
        let mut ck = Checkpoint::new();
        ck.push_scalar("x", 1.0);
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn wrong_dtype_is_reported() {
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::<f32>::zeros(vec![2]));
        assert!(matches!(
            ck.get::<f64>("w"),
            Err(CheckpointError::WrongDtype(_))
        ));
        assert!(matches!(
            ck.get::<f32>("nope"),
            Err(CheckpointError::Missing(_))
        ));
    }
}
