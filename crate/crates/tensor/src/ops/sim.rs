use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::ops::linalg::gemm;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

const COS_EPS: f64 = 1e-8;

fn inv_norms<F: Float>(x: &[F], d: usize) -> Vec<F> {
    let eps = F::lit(COS_EPS);
    x.chunks(d)
        .map(|r| F::one() / r.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps))
        .collect()
}

fn scale_rows<F: Float>(x: &[F], d: usize, s: &[F]) -> Vec<F> {
    x.iter().enumerate().map(|(i, &v)| v * s[i / d]).collect()
}

impl<F: Float> Tape<F> {
    /// Row-vs-row cosine similarity: `a: [N,D]`, `b: [K,D]` → `[N,K]`.
    /// Rows with norm below 1e-8 are treated as having norm 1e-8.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::shape("cosine_similarity", format!("{sa:?} vs {sb:?}")));
        }
        let (n, k, d) = (sa[0], sb[0], sa[1]);
        let an = inv_norms(av.data(), d);
        let bn = inv_norms(bv.data(), d);
        let ah = scale_rows(av.data(), d, &an);
        let bh = scale_rows(bv.data(), d, &bn);
        let mut out = vec![F::zero(); n * k];
        gemm(n, d, k, &ah, false, &bh, true, &mut out, false);
        let value = Tensor::from_parts(vec![n, k], out);
        self.push("cosine_similarity", value, Op::Cosine { a, b, an, bn })
    }
}

fn normalize_backward<F: Float>(x: &[F], inv: &[F], d: usize, dhat: &[F], gx: &mut [F]) {
    let eps = F::lit(COS_EPS);
    for (r, &s) in inv.iter().enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let dr = &dhat[r * d..(r + 1) * d];
        let norm = F::one() / s;
        if norm > eps {
            let dot: F = row.iter().zip(dr).map(|(&v, &g)| v * s * g).sum();
            for j in 0..d {
                gx[r * d + j] += s * (dr[j] - row[j] * s * dot);
            }
        } else {
            for j in 0..d {
                gx[r * d + j] += s * dr[j];
            }
        }
    }
}

pub(crate) fn cosine_backward<F: Float>(
    a: Var,
    b: Var,
    an: &[F],
    bn: &[F],
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let av = sink.value(a);
    let bv = sink.value(b);
    let (n, d) = (av.shape()[0], av.shape()[1]);
    let k = bv.shape()[0];
    if sink.wants(a) {
        let bh = scale_rows(bv.data(), d, bn);
        let mut dhat = vec![F::zero(); n * d];
        gemm(n, k, d, g, false, &bh, false, &mut dhat, false);
        normalize_backward(av.data(), an, d, &dhat, sink.slot(a));
    }
    if sink.wants(b) {
        let ah = scale_rows(av.data(), d, an);
        let mut dhat = vec![F::zero(); k * d];
        gemm(k, n, d, g, true, &ah, false, &mut dhat, false);
        normalize_backward(bv.data(), bn, d, &dhat, sink.slot(b));
    }
}
