use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// `c[m×n] (+)= op(a) · op(b)` where `a` is stored `[m,k]` (or `[k,m]` when
/// `ta`) and `b` is stored `[k,n]` (or `[n,k]` when `tb`), all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    b: &[F],
    tb: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand extents");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

impl<F: Float> Tape<F> {
    /// Matrix product `op(a) · op(b)`. Supports `[m,k]×[k,n]`, batched
    /// `[B,m,k]×[B,k,n]`, and `[B,m,k]×[k,n]` with a shared right operand.
    /// `ta`/`tb` transpose the last two axes of the respective operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let err = || TensorError::shape("matmul", format!("{sa:?} (t={ta}) x {sb:?} (t={tb})"));
        let (batch, b_shared) = match (sa.len(), sb.len()) {
            (2, 2) => (1, false),
            (3, 3) if sa[0] == sb[0] => (sa[0], false),
            (3, 2) => (sa[0], true),
            _ => return Err(err()),
        };
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![F::zero(); batch * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for bi in 0..batch {
            let bslice = if b_shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
            gemm(
                m, k, n,
                &ad[bi * m * k..(bi + 1) * m * k], ta,
                bslice, tb,
                &mut out[bi * m * n..(bi + 1) * m * n], false,
            );
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::from_parts(shape, out);
        self.push("matmul", value, Op::MatMul { a, b, ta, tb, batch, m, k, n, b_shared })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return Err(TensorError::shape("linear", format!("x {sx:?}, w {sw:?}")));
        }
        let (out_dim, in_dim) = (sw[0], sw[1]);
        let rows = xv.len() / in_dim.max(1);
        let mut out = vec![F::zero(); rows * out_dim];
        gemm(rows, in_dim, out_dim, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            self.check(b)?;
            let bv = self.value(b);
            if bv.shape() != [out_dim] {
                return Err(TensorError::shape("linear", format!("bias {:?} for out {out_dim}", bv.shape())));
            }
            for row in out.chunks_mut(out_dim) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().expect("rank >= 1") = out_dim;
        let value = Tensor::from_parts(shape, out);
        self.push("linear", value, Op::Linear { x, w, b })
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward<F: Float>(
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    batch: usize,
    (m, k, n): (usize, usize, usize),
    b_shared: bool,
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let av = sink.value(a);
    let bv = sink.value(b);
    let (ad, bd) = (av.data(), bv.data());
    let bslice = |bi: usize| if b_shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
    if sink.wants(a) {
        let ga = sink.slot(a);
        for bi in 0..batch {
            let gc = &g[bi * m * n..(bi + 1) * m * n];
            let gslot = &mut ga[bi * m * k..(bi + 1) * m * k];
            if ta {
                gemm(k, n, m, bslice(bi), tb, gc, true, gslot, true);
            } else {
                gemm(m, n, k, gc, false, bslice(bi), !tb, gslot, true);
            }
        }
    }
    if sink.wants(b) {
        let gb = sink.slot(b);
        for bi in 0..batch {
            let gc = &g[bi * m * n..(bi + 1) * m * n];
            let aslice = &ad[bi * m * k..(bi + 1) * m * k];
            let range = if b_shared { 0..k * n } else { bi * k * n..(bi + 1) * k * n };
            let gslot = &mut gb[range];
            if tb {
                gemm(n, m, k, gc, true, aslice, ta, gslot, true);
            } else {
                gemm(k, m, n, aslice, !ta, gc, false, gslot, true);
            }
        }
    }
}

pub(crate) fn linear_backward<F: Float>(
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let xv = sink.value(x);
    let wv = sink.value(w);
    let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
    let rows = xv.len() / in_dim.max(1);
    if sink.wants(x) {
        gemm(rows, out_dim, in_dim, g, false, wv.data(), false, sink.slot(x), true);
    }
    if sink.wants(w) {
        gemm(out_dim, rows, in_dim, g, true, xv.data(), false, sink.slot(w), true);
    }
    if let Some(b) = b {
        if sink.wants(b) {
            let gb = sink.slot(b);
            for row in g.chunks(out_dim) {
                for (s, &gi) in gb.iter_mut().zip(row) {
                    *s += gi;
                }
            }
        }
    }
}
