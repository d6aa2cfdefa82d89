//! Named parameter storage and the small layers built on it.

use indexmap::IndexMap;
use omdet_tensor::{mhsa, AttentionVars, Float, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{usage, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to; freeze masks are
/// expressed over groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Backbone,
    Fpn,
    TaskEncoder,
    LabelEncoder,
    Mdn,
    /// Raw word vectors (frozen except in prompt tuning).
    WordTable,
}

impl Group {
    pub const ALL: [Group; 6] =
        [Group::Backbone, Group::Fpn, Group::TaskEncoder, Group::LabelEncoder, Group::Mdn, Group::WordTable];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Fpn => "fpn",
            Group::TaskEncoder => "task_encoder",
            Group::LabelEncoder => "label_encoder",
            Group::Mdn => "mdn",
            Group::WordTable => "word_table",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub group: Group,
}

/// Ordered name → tensor map. Insertion order is stable and defines the
/// serialization order of checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Param<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, group: Group) -> ParamId {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter {name}");
        let (i, _) = self.entries.insert_full(name, Param { value, group });
        ParamId(i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param<F>)> {
        self.entries.iter().enumerate().map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn scalar_count(&self, filter: impl Fn(ParamId, Group) -> bool) -> usize {
        self.iter().filter(|(id, _, p)| filter(*id, p.group)).map(|(_, _, p)| p.value.len()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), group: p.group }))
                .collect(),
        }
    }

    /// Puts every parameter on `tape`; `trainable` decides which ones are
    /// gradient leaves and which are constants.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: impl Fn(ParamId, Group) -> bool) -> Bound {
        let vars = self
            .iter()
            .map(|(id, _, p)| {
                if trainable(id, p.group) {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded initializer; all draws happen in f64 so that f32 and f64 models
/// built from the same seed agree up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<F: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let n = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                F::lit(std * z)
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    pub fn uniform<F: Float>(&mut self, shape: &[usize], bound: f64) -> Tensor<F> {
        let n = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| F::lit(self.rng.random_range(-bound..=bound))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        inp: usize,
        out: usize,
        group: Group,
    ) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = store.add(format!("{name}.weight"), init.uniform(&[out, inp], bound), group);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![out]), group);
        Linear { w, b: Some(b) }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize, group: Group) -> Self {
        let g = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], F::one()), group);
        let b = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), group);
        Norm { g, b }
    }

    pub fn layer<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p.var(self.g), p.var(self.b))?)
    }

    pub fn group<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, groups: usize) -> Result<Var> {
        Ok(tape.group_norm(x, p.var(self.g), p.var(self.b), groups)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        group: Group,
    ) -> Self {
        let fan_in = (inp * kernel * kernel) as f64;
        let w = store.add(format!("{name}.weight"), init.normal(&[out, inp, kernel, kernel], (2.0 / fan_in).sqrt()), group);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![out]), group);
        Conv { w, b, stride, pad: kernel / 2 }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)?)
    }
}

/// Multi-head self-attention block parameters (residual + layer norm).
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm: Norm,
    pub heads: usize,
}

impl Attention {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        group: Group,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::error::config(format!("{name}: dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, group),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, group),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, group),
            o: Linear::new(store, init, &format!("{name}.o"), dim, dim, group),
            norm: Norm::new(store, &format!("{name}.norm"), dim, group),
            heads,
        })
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let bias = |l: &Linear| l.b.map(|b| p.var(b)).ok_or_else(|| usage("attention projections need biases"));
        let vars = AttentionVars {
            wq: p.var(self.q.w),
            bq: bias(&self.q)?,
            wk: p.var(self.k.w),
            bk: bias(&self.k)?,
            wv: p.var(self.v.w),
            bv: bias(&self.v)?,
            wo: p.var(self.o.w),
            bo: bias(&self.o)?,
            ln_g: p.var(self.norm.g),
            ln_b: p.var(self.norm.b),
        };
        Ok(mhsa(tape, x, &vars, self.heads, key_mask)?)
    }
}

/// `LN(x + W2·gelu(W1·x))`
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    l1: Linear,
    l2: Linear,
    norm: Norm,
}

impl Ffn {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        dim: usize,
        hidden: usize,
        group: Group,
    ) -> Self {
        Ffn {
            l1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, group),
            l2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, group),
            norm: Norm::new(store, &format!("{name}.norm"), dim, group),
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        let h = self.l2.forward(tape, p, h)?;
        let r = tape.add(x, h)?;
        self.norm.layer(tape, p, r)
    }
}

/// Multiplies each row of `x: [L, d]` by the matching entry of `keep`.
pub fn mask_rows<F: Float>(tape: &mut Tape<F>, x: Var, keep: &[bool]) -> Result<Var> {
    let m: Vec<F> = keep.iter().map(|&k| if k { F::one() } else { F::zero() }).collect();
    let m = tape.constant(Tensor::new(vec![keep.len(), 1], m)?);
    Ok(tape.mul(x, m)?)
}
