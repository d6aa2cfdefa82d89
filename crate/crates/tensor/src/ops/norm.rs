use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Normalizes each chunk in place; returns (xhat, rstd per chunk).
fn normalize_chunks<F: Float>(x: &[F], chunk: usize) -> (Vec<F>, Vec<F>) {
    let eps = F::lit(NORM_EPS);
    let n = F::lit(chunk as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / chunk.max(1));
    for row in x.chunks(chunk) {
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let r = F::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    (xhat, rstd)
}

impl<F: Float> Tape<F> {
    /// Layer normalization over the last axis with affine `g`, `b` of that size.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| TensorError::shape("layer_norm", "rank-0 input"))?;
        if self.value(g).shape() != [d] || self.value(b).shape() != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), self.value(g).shape(), self.value(b).shape()),
            ));
        }
        let (xhat, rstd) = normalize_chunks(xv.data(), d);
        let (gd, bd) = (self.value(g).data(), self.value(b).data());
        let out: Vec<F> = xhat.iter().enumerate().map(|(i, &v)| v * gd[i % d] + bd[i % d]).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("layer_norm", value, Op::LayerNorm { x, g, b, xhat, rstd })
    }

    /// Group normalization of `[C,H,W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, g: Var, b: Var, groups: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || groups == 0 || s[0] % groups != 0 {
            return Err(TensorError::shape("group_norm", format!("x {s:?} with {groups} groups")));
        }
        let c = s[0];
        if self.value(g).shape() != [c] || self.value(b).shape() != [c] {
            return Err(TensorError::shape("group_norm", "affine parameters must be [C]"));
        }
        let hw = s[1] * s[2];
        let (xhat, rstd) = normalize_chunks(xv.data(), xv.len() / groups);
        let (gd, bd) = (self.value(g).data(), self.value(b).data());
        let out: Vec<F> = xhat.iter().enumerate().map(|(i, &v)| v * gd[i / hw] + bd[i / hw]).collect();
        let value = Tensor::from_parts(s.to_vec(), out);
        self.push("group_norm", value, Op::GroupNorm { x, g, b, groups, xhat, rstd })
    }
}

/// Shared backward for both norms. `chunk` is the normalization extent and
/// `channel_of(i)` maps a flat index to its affine parameter index.
#[allow(clippy::too_many_arguments)]
fn norm_backward<F: Float>(
    x: Var,
    gv: Var,
    bv: Var,
    xhat: &[F],
    rstd: &[F],
    chunk: usize,
    channel_of: impl Fn(usize) -> usize,
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    if sink.wants(gv) {
        let gg = sink.slot(gv);
        for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
            gg[channel_of(i)] += gi * xh;
        }
    }
    if sink.wants(bv) {
        let gb = sink.slot(bv);
        for (i, &gi) in g.iter().enumerate() {
            gb[channel_of(i)] += gi;
        }
    }
    if sink.wants(x) {
        let gamma = sink.value(gv);
        let gamma = gamma.data();
        let n = F::lit(chunk as f64);
        let gx = sink.slot(x);
        for (ci, &r) in rstd.iter().enumerate() {
            let range = ci * chunk..(ci + 1) * chunk;
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for i in range.clone() {
                let d = g[i] * gamma[channel_of(i)];
                sum_d += d;
                sum_dx += d * xhat[i];
            }
            let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
            for i in range {
                let d = g[i] * gamma[channel_of(i)];
                gx[i] += r * (d - mean_d - xhat[i] * mean_dx);
            }
        }
    }
}

pub(crate) fn layer_norm_backward<F: Float>(
    x: Var,
    gv: Var,
    bv: Var,
    xhat: &[F],
    rstd: &[F],
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let d = sink.value(gv).len();
    norm_backward(x, gv, bv, xhat, rstd, d, |i| i % d, g, sink);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<F: Float>(
    x: Var,
    gv: Var,
    bv: Var,
    groups: usize,
    xhat: &[F],
    rstd: &[F],
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let s = sink.value(x).shape().to_vec();
    let hw = s[1] * s[2];
    let chunk = s[0] * hw / groups;
    norm_backward(x, gv, bv, xhat, rstd, chunk, |i| i / hw, g, sink);
}
