//! OMCK: a flat, versioned container of named little-endian arrays.
//!
//! Layout: `"OMCK"`, version `u32`, entry count `u32`, then per entry:
//! name length `u16`, UTF-8 name, dtype `u8`, rank `u8`, dims `u64` each,
//! payload byte length `u64`, payload.

use std::path::Path;

use indexmap::IndexMap;
use omdet_tensor::{DType, Float, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OMCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryType {
    F32,
    F64,
    U64,
    Bytes,
}

impl EntryType {
    fn code(self) -> u8 {
        match self {
            EntryType::F32 => 0,
            EntryType::F64 => 1,
            EntryType::U64 => 2,
            EntryType::Bytes => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => EntryType::F32,
            1 => EntryType::F64,
            2 => EntryType::U64,
            3 => EntryType::Bytes,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            EntryType::F32 => 4,
            EntryType::F64 | EntryType::U64 => 8,
            EntryType::Bytes => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dtype: EntryType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: IndexMap<String, Entry>,
}

fn missing(name: &str) -> Error {
    Error::Data(format!("checkpoint has no entry {name:?}"))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_tensor<F: Float>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        let dtype = match F::DTYPE {
            DType::F32 => EntryType::F32,
            DType::F64 => EntryType::F64,
        };
        let mut bytes = Vec::with_capacity(t.len() * F::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.entries.insert(name.into(), Entry { dtype, shape: t.shape().to_vec(), bytes });
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, v: &[u64]) {
        let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.entries.insert(name.into(), Entry { dtype: EntryType::U64, shape: vec![v.len()], bytes });
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, b: &[u8]) {
        self.entries.insert(name.into(), Entry { dtype: EntryType::Bytes, shape: vec![b.len()], bytes: b.to_vec() });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Reads a float entry, converting between f32 and f64 if needed.
    pub fn tensor<F: Float>(&self, name: &str) -> Result<Tensor<F>> {
        let e = self.entries.get(name).ok_or_else(|| missing(name))?;
        // widening and same-width reads are exact; f64 -> f32 rounds
        let data: Vec<F> = match e.dtype {
            EntryType::F32 => e.bytes.chunks_exact(4).map(|c| F::lit(f64::from(f32::read_le(c)))).collect(),
            EntryType::F64 => e.bytes.chunks_exact(8).map(|c| F::lit(f64::read_le(c))).collect(),
            _ => return Err(Error::Data(format!("entry {name:?} is not a float tensor"))),
        };
        Ok(Tensor::new(e.shape.clone(), data)?)
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let e = self.entries.get(name).ok_or_else(|| missing(name))?;
        if e.dtype != EntryType::U64 {
            return Err(Error::Data(format!("entry {name:?} is not u64")));
        }
        Ok(e.bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        let e = self.entries.get(name).ok_or_else(|| missing(name))?;
        if e.dtype != EntryType::Bytes {
            return Err(Error::Data(format!("entry {name:?} is not a byte string")));
        }
        Ok(&e.bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Usage(format!("entry name too long: {name:?}")))?;
            let rank = u8::try_from(e.shape.len()).map_err(|_| Error::Usage(format!("rank too large: {name:?}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype.code());
            out.push(rank);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(e.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |n: usize, pos: &mut usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(Error::Format {
                offset: *pos,
                msg: format!("truncated: need {n} more bytes"),
            })?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        if take(4, &mut pos)? != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected OMCK".into() });
        }
        let version = u32::from_le_bytes(take(4, &mut pos)?.try_into().expect("4"));
        if version != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let count = u32::from_le_bytes(take(4, &mut pos)?.try_into().expect("4"));
        let mut entries = IndexMap::new();
        for _ in 0..count {
            let at = pos;
            let len = u16::from_le_bytes(take(2, &mut pos)?.try_into().expect("2")) as usize;
            let name = std::str::from_utf8(take(len, &mut pos)?)
                .map_err(|_| Error::Format { offset: at + 2, msg: "entry name is not UTF-8".into() })?
                .to_string();
            let code_at = pos;
            let head = take(2, &mut pos)?;
            let dtype = EntryType::from_code(head[0])
                .ok_or(Error::Format { offset: code_at, msg: format!("unknown dtype code {}", head[0]) })?;
            let rank = head[1] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8, &mut pos)?.try_into().expect("8")) as usize);
            }
            let len_at = pos;
            let n = u64::from_le_bytes(take(8, &mut pos)?.try_into().expect("8")) as usize;
            let expected = shape.iter().product::<usize>().checked_mul(dtype.width());
            if expected != Some(n) {
                return Err(Error::Format { offset: len_at, msg: format!("entry {name:?}: {n} bytes for shape {shape:?}") });
            }
            let payload = take(n, &mut pos)?.to_vec();
            if entries.insert(name.clone(), Entry { dtype, shape, bytes: payload }).is_some() {
                return Err(Error::Format { offset: at, msg: format!("duplicate entry {name:?}") });
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format { offset: pos, msg: "trailing bytes after last entry".into() });
        }
        Ok(Checkpoint { entries })
    }

    /// Writes through a temporary file and a rename, so a crash never leaves
    /// a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("omck.tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}
