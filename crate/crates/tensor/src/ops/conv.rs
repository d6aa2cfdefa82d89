use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::ops::linalg::gemm;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<F: Float>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let p = g.positions();
    let mut cols = vec![F::zero(); g.patch() * p];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..];
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[oy * g.ow + ox] = src[xx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Float>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let p = g.positions();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dx[base + xx as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Float> Tape<F> {
    /// 2-D convolution of a single image `x: [C,H,W]` with `w: [O,C,kh,kw]`,
    /// lowered to im2col + matmul.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        let bad = |d: &str| TensorError::shape("conv2d", format!("x {sx:?}, w {sw:?}: {d}"));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(bad("expected x [C,H,W] and w [O,C,kh,kw]"));
        }
        if stride == 0 {
            return Err(bad("stride must be >= 1"));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(bad("kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, o, kh, kw, stride, pad, oh, ow };
        let cols = im2col(xv.data(), &geom);
        let p = geom.positions();
        let mut out = vec![F::zero(); o * p];
        gemm(o, geom.patch(), p, wv.data(), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            self.check(b)?;
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(bad("bias must be [O]"));
            }
            for (row, &bb) in out.chunks_mut(p).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v += bb);
            }
        }
        let value = Tensor::from_parts(vec![o, oh, ow], out);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom, cols })
    }

    /// Nearest-neighbour ×2 upsampling of `[C,H,W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 {
            return Err(TensorError::shape("upsample2x", format!("expected [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![F::zero(); c * 4 * h * w];
        let d = av.data();
        for ci in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + x] = d[(ci * h + y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::from_parts(vec![c, 2 * h, 2 * w], out);
        self.push("upsample2x", value, Op::Upsample2x { a })
    }
}

pub(crate) fn conv2d_backward<F: Float>(
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    cols: &[F],
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let p = geom.positions();
    let k = geom.patch();
    if sink.wants(w) {
        gemm(geom.o, p, k, g, false, cols, true, sink.slot(w), true);
    }
    if let Some(b) = b {
        if sink.wants(b) {
            for (s, row) in sink.slot(b).iter_mut().zip(g.chunks(p)) {
                *s += row.iter().copied().sum::<F>();
            }
        }
    }
    if sink.wants(x) {
        let wv = sink.value(w);
        let mut dcols = vec![F::zero(); k * p];
        gemm(k, geom.o, p, wv.data(), true, g, false, &mut dcols, false);
        col2im(&dcols, geom, sink.slot(x));
    }
}

pub(crate) fn upsample_backward<F: Float>(a: Var, g: &[F], sink: &mut GradSink<'_, F>) {
    if !sink.wants(a) {
        return;
    }
    let (ga, av) = sink.slot_with_value(a);
    let s = av.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    for ci in 0..c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                ga[(ci * h + y / 2) * w + x / 2] += g[(ci * 2 * h + y) * 2 * w + x];
            }
        }
    }
}
