//! Word embeddings and the order-free task / label set encoders.

use std::path::Path;

use indexmap::IndexMap;
use omdet_tensor::{Float, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{mask_rows, Attention, Bound, Ffn, Group, Init, Linear, ParamStore};

const OMEV_MAGIC: &[u8; 4] = b"OMEV";
const OMEV_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A task slot: a word, or `None` for a masked pad position.
pub type Slot = Option<String>;

#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingProvider {
    /// Gaussian vector seeded by FNV-1a of the word, unit-normalized.
    Hash { dim: usize },
    /// Vectors loaded from an OMEV file.
    File { dim: usize, table: IndexMap<String, Vec<f32>> },
}

impl EmbeddingProvider {
    pub fn hash(dim: usize) -> Self {
        EmbeddingProvider::Hash { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Hash { dim } | EmbeddingProvider::File { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, word: &str) -> Result<Vec<f64>> {
        match self {
            EmbeddingProvider::Hash { dim } => {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
                let v: Vec<f64> = (0..*dim).map(|_| rng.sample(StandardNormal)).collect();
                Ok(normalized(&v))
            }
            EmbeddingProvider::File { table, .. } => table
                .get(word)
                .map(|v| v.iter().map(|&x| f64::from(x)).collect())
                .ok_or_else(|| Error::Lookup(word.to_string())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_omev(&bytes)
    }

    pub fn from_omev(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != OMEV_MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected OMEV".into() });
        }
        let version = r.u32()?;
        if version != OMEV_VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format { offset: 12, msg: "dim must be positive".into() });
        }
        let mut table = IndexMap::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format { offset: at + 2, msg: "name is not UTF-8".into() })?
                .to_string();
            let vec_at = r.pos;
            let raw: Vec<f64> = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::Format { offset: vec_at, msg: format!("vector for {name:?} cannot be normalized") });
            }
            if table.contains_key(&name) {
                return Err(Error::Format { offset: at, msg: format!("duplicate entry {name:?}") });
            }
            table.insert(name, raw.iter().map(|v| (v / norm) as f32).collect());
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, msg: "trailing bytes after last entry".into() });
        }
        Ok(EmbeddingProvider::File { dim, table })
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Serializes `(name, vector)` entries as an OMEV file body.
pub fn to_omev(dim: usize, entries: &[(String, Vec<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(OMEV_MAGIC);
    out.extend_from_slice(&OMEV_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (name, v) in entries {
        if v.len() != dim {
            return Err(Error::Usage(format!("entry {name:?} has {} values, expected {dim}", v.len())));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::Usage(format!("name too long: {name:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format { offset: self.pos, msg: format!("truncated: need {n} more bytes") });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Raw embeddings of a task: `[k, d_text]`, zero rows at pad slots, plus the
/// pad mask (`true` = pad).
pub fn embed_labels<F: Float>(provider: &EmbeddingProvider, slots: &[Slot]) -> Result<(Tensor<F>, Vec<bool>)> {
    if slots.is_empty() {
        return Err(Error::Usage("a task needs at least one slot".into()));
    }
    let d = provider.dim();
    let mut data = Vec::with_capacity(slots.len() * d);
    for s in slots {
        match s {
            Some(w) => data.extend(provider.embed(w)?.into_iter().map(F::lit)),
            None => data.extend(std::iter::repeat_n(F::zero(), d)),
        }
    }
    let mask = slots.iter().map(Option::is_none).collect();
    Ok((Tensor::new(vec![slots.len(), d], data)?, mask))
}

/// Words-as-a-set encoder: projection then position-free transformer
/// layers; pad rows are masked out of attention and zeroed.
#[derive(Clone, Debug)]
pub struct SetEncoder {
    proj: Linear,
    layers: Vec<(Attention, Ffn)>,
}

impl SetEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        d_text: usize,
        d: usize,
        layers: usize,
        heads: usize,
        group: Group,
    ) -> Result<Self> {
        let proj = Linear::new(store, init, &format!("{name}.proj"), d_text, d, group);
        let layers = (0..layers)
            .map(|i| {
                let attn = Attention::new(store, init, &format!("{name}.layer{i}.attn"), d, heads, group)?;
                let ffn = Ffn::new(store, init, &format!("{name}.layer{i}.ffn"), d, 2 * d, group);
                Ok((attn, ffn))
            })
            .collect::<Result<_>>()?;
        Ok(SetEncoder { proj, layers })
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, raw: Var, pad: &[bool]) -> Result<Var> {
        let keep: Vec<bool> = pad.iter().map(|m| !m).collect();
        let mut x = self.proj.forward(tape, p, raw)?;
        x = mask_rows(tape, x, &keep)?;
        for (attn, ffn) in &self.layers {
            x = attn.forward(tape, p, x, Some(pad))?;
            x = ffn.forward(tape, p, x)?;
            x = mask_rows(tape, x, &keep)?;
        }
        Ok(x)
    }
}
