use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    /// tanh approximation
    Gelu,
    Sigmoid,
    Abs,
    Tanh,
    Exp,
}

/// Maps an output linear index to an input linear index under broadcasting.
#[derive(Debug, Clone)]
pub(crate) enum Bmap {
    Same,
    /// input repeats with period `len` (trailing-dims broadcast, e.g. a bias)
    Suffix(usize),
    /// each input element covers `inner` consecutive outputs (e.g. a row mask)
    Expand(usize),
    General(Vec<u32>),
}

impl Bmap {
    #[inline(always)]
    fn idx(&self, i: usize) -> usize {
        match self {
            Bmap::Same => i,
            Bmap::Suffix(len) => i % len,
            Bmap::Expand(inner) => i / inner,
            Bmap::General(map) => map[i] as usize,
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn make_map(out: &[usize], inp: &[usize]) -> Bmap {
    if out == inp {
        return Bmap::Same;
    }
    let rank = out.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, rank - inp.len()).chain(inp.iter().copied()).collect();
    // Suffix: leading dims broadcast, trailing dims equal.
    if let Some(first) = padded.iter().position(|&d| d != 1) {
        if padded[first..] == out[first..] {
            return Bmap::Suffix(numel(&out[first..]));
        }
    } else {
        return Bmap::Suffix(1);
    }
    // Expand: leading dims equal, trailing dims broadcast.
    if let Some(last) = padded.iter().rposition(|&d| d != 1) {
        if padded[..=last] == out[..=last] {
            return Bmap::Expand(numel(&out[last + 1..]));
        }
    }
    let mut in_strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        in_strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut index = vec![0usize; rank];
    for _ in 0..n {
        map.push(index.iter().zip(&in_strides).map(|(i, s)| i * s).sum::<usize>() as u32);
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Bmap::General(map)
}

pub(crate) fn binary<F: Float>(tape: &mut Tape<F>, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
    tape.check(a)?;
    tape.check(b)?;
    let name = binary_name(kind);
    let (av, bv) = (tape.value(a), tape.value(b));
    let shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
        TensorError::shape(name, format!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()))
    })?;
    let amap = make_map(&shape, av.shape());
    let bmap = make_map(&shape, bv.shape());
    let (ad, bd) = (av.data(), bv.data());
    let n = numel(&shape);
    let f: fn(F, F) -> F = match kind {
        BinaryKind::Add => |x, y| x + y,
        BinaryKind::Sub => |x, y| x - y,
        BinaryKind::Mul => |x, y| x * y,
        BinaryKind::Div => |x, y| x / y,
        BinaryKind::Max => |x, y| if x >= y { x } else { y },
        BinaryKind::Min => |x, y| if x <= y { x } else { y },
    };
    let out: Vec<F> = match (&amap, &bmap) {
        (Bmap::Same, Bmap::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (Bmap::Same, Bmap::Suffix(len)) => ad
            .chunks(*len)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect(),
        _ => (0..n).map(|i| f(ad[amap.idx(i)], bd[bmap.idx(i)])).collect(),
    };
    let value = Tensor::from_parts(shape, out);
    tape.push(name, value, Op::Binary { kind, a, b, amap, bmap })
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
        BinaryKind::Max => "maximum",
        BinaryKind::Min => "minimum",
    }
}

pub(crate) fn binary_backward<F: Float>(
    kind: BinaryKind,
    a: Var,
    b: Var,
    amap: &Bmap,
    bmap: &Bmap,
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let av = sink.value(a);
    let bv = sink.value(b);
    let (ad, bd) = (av.data(), bv.data());
    if sink.wants(a) {
        let ga = sink.slot(a);
        for (i, &gi) in g.iter().enumerate() {
            let (ia, ib) = (amap.idx(i), bmap.idx(i));
            ga[ia] += match kind {
                BinaryKind::Add | BinaryKind::Sub => gi,
                BinaryKind::Mul => gi * bd[ib],
                BinaryKind::Div => gi / bd[ib],
                BinaryKind::Max => if ad[ia] >= bd[ib] { gi } else { F::zero() },
                BinaryKind::Min => if ad[ia] <= bd[ib] { gi } else { F::zero() },
            };
        }
    }
    if sink.wants(b) {
        let gb = sink.slot(b);
        for (i, &gi) in g.iter().enumerate() {
            let (ia, ib) = (amap.idx(i), bmap.idx(i));
            gb[ib] += match kind {
                BinaryKind::Add => gi,
                BinaryKind::Sub => -gi,
                BinaryKind::Mul => gi * ad[ia],
                BinaryKind::Div => -gi * ad[ia] / (bd[ib] * bd[ib]),
                BinaryKind::Max => if ad[ia] >= bd[ib] { F::zero() } else { gi },
                BinaryKind::Min => if ad[ia] <= bd[ib] { F::zero() } else { gi },
            };
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus<F: Float>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn gelu<F: Float>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

#[inline]
fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = F::lit(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

pub(crate) fn unary<F: Float>(tape: &mut Tape<F>, kind: UnaryKind, a: Var) -> Result<Var> {
    tape.check(a)?;
    let av = tape.value(a);
    let f: fn(F) -> F = match kind {
        UnaryKind::Relu => |x| if x > F::zero() { x } else { F::zero() },
        UnaryKind::Gelu => gelu,
        UnaryKind::Sigmoid => sigmoid,
        UnaryKind::Abs => |x| x.abs(),
        UnaryKind::Tanh => |x| x.tanh(),
        UnaryKind::Exp => |x| x.exp(),
    };
    let out: Vec<F> = av.data().iter().map(|&x| f(x)).collect();
    let value = Tensor::from_parts(av.shape().to_vec(), out);
    let name = match kind {
        UnaryKind::Relu => "relu",
        UnaryKind::Gelu => "gelu",
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::Abs => "abs",
        UnaryKind::Tanh => "tanh",
        UnaryKind::Exp => "exp",
    };
    tape.push(name, value, Op::Unary { kind, a })
}

pub(crate) fn unary_backward<F: Float>(
    kind: UnaryKind,
    a: Var,
    out: &Tensor<F>,
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    if !sink.wants(a) {
        return;
    }
    let (ga, av) = sink.slot_with_value(a);
    let (x, y) = (av.data(), out.data());
    for i in 0..g.len() {
        ga[i] += g[i]
            * match kind {
                UnaryKind::Relu => if x[i] > F::zero() { F::one() } else { F::zero() },
                UnaryKind::Gelu => gelu_grad(x[i]),
                UnaryKind::Sigmoid => y[i] * (F::one() - y[i]),
                UnaryKind::Abs => x[i].signum() * if x[i] == F::zero() { F::zero() } else { F::one() },
                UnaryKind::Tanh => F::one() - y[i] * y[i],
                UnaryKind::Exp => y[i],
            };
    }
}

impl<F: Float> Tape<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, BinaryKind::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, BinaryKind::Max, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, BinaryKind::Min, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        unary(self, UnaryKind::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        unary(self, UnaryKind::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        unary(self, UnaryKind::Sigmoid, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        unary(self, UnaryKind::Abs, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        unary(self, UnaryKind::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        unary(self, UnaryKind::Exp, a)
    }

    /// `mul * a + add` with constant scalars.
    pub fn affine(&mut self, a: Var, mul: F, add: F) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let out = av.data().iter().map(|&x| mul * x + add).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.push("affine", value, Op::Affine { a, mul })
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        self.affine(a, c, F::zero())
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -F::one(), F::zero())
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes where
    /// `lo <= x <= hi` (boundaries inclusive).
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Result<Var> {
        self.check(a)?;
        if lo > hi {
            return Err(TensorError::Usage(format!("clamp: lo {lo} > hi {hi}")));
        }
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x.max(lo).min(hi)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.push("clamp", value, Op::Clamp { a, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let d = *av.shape().last().ok_or_else(|| TensorError::shape("softmax", "rank-0 input"))?;
        if d == 0 {
            return Err(TensorError::shape("softmax", "empty last axis"));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax { a })
    }
}

pub(crate) fn affine_backward<F: Float>(a: Var, mul: F, g: &[F], sink: &mut GradSink<'_, F>) {
    if sink.wants(a) {
        for (s, &gi) in sink.slot(a).iter_mut().zip(g) {
            *s += gi * mul;
        }
    }
}

pub(crate) fn clamp_backward<F: Float>(a: Var, lo: F, hi: F, g: &[F], sink: &mut GradSink<'_, F>) {
    if sink.wants(a) {
        let (ga, av) = sink.slot_with_value(a);
        for ((s, &gi), &x) in ga.iter_mut().zip(g).zip(av.data()) {
            if x >= lo && x <= hi {
                *s += gi;
            }
        }
    }
}

pub(crate) fn softmax_backward<F: Float>(a: Var, out: &Tensor<F>, g: &[F], sink: &mut GradSink<'_, F>) {
    if !sink.wants(a) {
        return;
    }
    let d = *out.shape().last().expect("rank >= 1");
    let ga = sink.slot(a);
    for ((grow, yrow), srow) in g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)) {
        let dot: F = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
        for j in 0..d {
            srow[j] += yrow[j] * (grow[j] - dot);
        }
    }
}
