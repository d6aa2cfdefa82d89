//! Bilinear sampling and RoIAlign over `[C,H,W]` feature maps.
//!
//! Coordinates are in feature-index space: the centre of cell `(i, j)` is at
//! `(y=i, x=j)`. Points further than one cell outside the map sample zero;
//! points in the border band are clamped onto the edge.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// Corner indices and weights of one bilinear sample, plus the weight
/// derivatives with respect to the sample's y and x coordinates.
pub(crate) struct Bilinear<F> {
    pub idx: [usize; 4],
    pub w: [F; 4],
    pub dy: [F; 4],
    pub dx: [F; 4],
}

fn axis_coeffs<F: Float>(v: F, size: usize) -> (usize, usize, F, bool) {
    let (mut v, mut live) = if v <= F::zero() { (F::zero(), false) } else { (v, true) };
    let mut low = v.floor().to_usize().unwrap_or(0);
    let high;
    if low + 1 >= size {
        low = size - 1;
        high = size - 1;
        v = F::lit(low as f64);
        live = false;
    } else {
        high = low + 1;
    }
    (low, high, v - F::lit(low as f64), live)
}

pub(crate) fn bilinear_coeffs<F: Float>(y: F, x: F, h: usize, w: usize) -> Option<Bilinear<F>> {
    let one = F::one();
    if h == 0 || w == 0 || y < -one || y > F::lit(h as f64) || x < -one || x > F::lit(w as f64) {
        return None;
    }
    let (yl, yh, ly, ylive) = axis_coeffs(y, h);
    let (xl, xh, lx, xlive) = axis_coeffs(x, w);
    let (hy, hx) = (one - ly, one - lx);
    let z = F::zero();
    let dy = if ylive { [-hx, -lx, hx, lx] } else { [z; 4] };
    let dx = if xlive { [-hy, hy, -ly, ly] } else { [z; 4] };
    Some(Bilinear {
        idx: [yl * w + xl, yl * w + xh, yh * w + xl, yh * w + xh],
        w: [hy * hx, hy * lx, ly * hx, ly * lx],
        dy,
        dx,
    })
}

/// Static parameters of [`Tape::roi_align`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignCfg {
    /// output grid is `pool × pool`
    pub pool: usize,
    /// sub-samples per bin along each axis
    pub sampling: usize,
    /// image-to-feature coordinate scale (1 / stride)
    pub spatial_scale: f64,
    /// half-pixel offset (RoIAlignV2 convention)
    pub aligned: bool,
}

impl Default for RoiAlignCfg {
    fn default() -> Self {
        RoiAlignCfg { pool: 7, sampling: 2, spatial_scale: 1.0, aligned: true }
    }
}

impl RoiAlignCfg {
    /// Fractional position of sub-sample `s` of bin `b` within the box.
    fn frac(&self, bin: usize, sub: usize) -> f64 {
        (bin as f64 + (sub as f64 + 0.5) / self.sampling as f64) / self.pool as f64
    }
}

impl<F: Float> Tape<F> {
    /// Samples `feat: [C,H,W]` at `points: [M,2]` given as `(x, y)` pairs;
    /// returns `[M, C]`.
    pub fn bilinear_sample(&mut self, feat: Var, points: Var) -> Result<Var> {
        self.check(feat)?;
        self.check(points)?;
        let (fv, pv) = (self.value(feat), self.value(points));
        let (sf, sp) = (fv.shape(), pv.shape());
        if sf.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(TensorError::shape("bilinear_sample", format!("feat {sf:?}, points {sp:?}")));
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let m = sp[0];
        let hw = h * w;
        let fd = fv.data();
        let mut out = vec![F::zero(); m * c];
        for (i, p) in pv.data().chunks(2).enumerate() {
            if let Some(b) = bilinear_coeffs(p[1], p[0], h, w) {
                for ch in 0..c {
                    let plane = &fd[ch * hw..];
                    out[i * c + ch] = (0..4).map(|k| b.w[k] * plane[b.idx[k]]).sum();
                }
            }
        }
        let value = Tensor::from_parts(vec![m, c], out);
        self.push("bilinear_sample", value, Op::Bilinear { feat, points })
    }

    /// RoIAlign of `boxes: [N,4]` (xyxy, image coordinates) over one feature
    /// map `[C,H,W]`; returns `[N, C, pool, pool]`. Differentiable with
    /// respect to both the features and the box coordinates.
    pub fn roi_align(&mut self, feat: Var, boxes: Var, cfg: RoiAlignCfg) -> Result<Var> {
        self.check(feat)?;
        self.check(boxes)?;
        let (fv, bv) = (self.value(feat), self.value(boxes));
        let (sf, sb) = (fv.shape(), bv.shape());
        if sf.len() != 3 || sb.len() != 2 || sb[1] != 4 {
            return Err(TensorError::shape("roi_align", format!("feat {sf:?}, boxes {sb:?}")));
        }
        if cfg.pool == 0 || cfg.sampling == 0 {
            return Err(TensorError::Usage("roi_align: pool and sampling must be >= 1".into()));
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let n = sb[0];
        let (p, s) = (cfg.pool, cfg.sampling);
        let hw = h * w;
        let norm = F::lit(1.0 / (s * s) as f64);
        let fd = fv.data();
        let pp = p * p;
        let mut out = vec![F::zero(); n * c * pp];
        let mut samples = Vec::with_capacity(pp * s * s);
        for (bi, bx) in bv.data().chunks(4).enumerate() {
            box_samples(bx, &cfg, h, w, &mut samples);
            for (ch, o) in out[bi * c * pp..(bi + 1) * c * pp].chunks_exact_mut(pp).enumerate() {
                let plane = &fd[ch * hw..(ch + 1) * hw];
                for sm in &samples {
                    let b = &sm.b;
                    let v = b.w[0] * plane[b.idx[0]]
                        + b.w[1] * plane[b.idx[1]]
                        + b.w[2] * plane[b.idx[2]]
                        + b.w[3] * plane[b.idx[3]];
                    o[sm.bin] += v * norm;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, p, p], out);
        self.push("roi_align", value, Op::RoiAlign { feat, boxes, cfg })
    }
}

/// One in-map sample point of a box.
struct Sample<F> {
    bin: usize,
    ty: F,
    tx: F,
    b: Bilinear<F>,
}

/// Collects the in-map sample points of one box into `out`.
fn box_samples<F: Float>(bx: &[F], cfg: &RoiAlignCfg, h: usize, w: usize, out: &mut Vec<Sample<F>>) {
    out.clear();
    for_each_sample(bx, cfg, |ph, pw, y, x, ty, tx| {
        if let Some(b) = bilinear_coeffs(y, x, h, w) {
            out.push(Sample { bin: ph * cfg.pool + pw, ty, tx, b });
        }
    });
}

/// Visits every sample point of one box: `(bin_y, bin_x, y, x, ty, tx)` where
/// `ty`/`tx` are the fractional positions used for the box-coordinate gradient.
fn for_each_sample<F: Float>(bx: &[F], cfg: &RoiAlignCfg, mut visit: impl FnMut(usize, usize, F, F, F, F)) {
    let scale = F::lit(cfg.spatial_scale);
    let off = if cfg.aligned { F::lit(0.5) } else { F::zero() };
    let (x1, y1, x2, y2) = (bx[0], bx[1], bx[2], bx[3]);
    for ph in 0..cfg.pool {
        for iy in 0..cfg.sampling {
            let ty = F::lit(cfg.frac(ph, iy));
            let y = scale * (y1 * (F::one() - ty) + y2 * ty) - off;
            for pw in 0..cfg.pool {
                for ix in 0..cfg.sampling {
                    let tx = F::lit(cfg.frac(pw, ix));
                    let x = scale * (x1 * (F::one() - tx) + x2 * tx) - off;
                    visit(ph, pw, y, x, ty, tx);
                }
            }
        }
    }
}

pub(crate) fn bilinear_backward<F: Float>(feat: Var, points: Var, g: &[F], sink: &mut GradSink<'_, F>) {
    let fv = sink.value(feat);
    let pv = sink.value(points);
    let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
    let hw = h * w;
    let coeffs: Vec<Option<Bilinear<F>>> =
        pv.data().chunks(2).map(|p| bilinear_coeffs(p[1], p[0], h, w)).collect();
    if sink.wants(feat) {
        let gf = sink.slot(feat);
        for (i, b) in coeffs.iter().enumerate() {
            let Some(b) = b else { continue };
            for ch in 0..c {
                let gi = g[i * c + ch];
                for k in 0..4 {
                    gf[ch * hw + b.idx[k]] += gi * b.w[k];
                }
            }
        }
    }
    if sink.wants(points) {
        let fd = fv.data();
        let gp = sink.slot(points);
        for (i, b) in coeffs.iter().enumerate() {
            let Some(b) = b else { continue };
            let (mut gy, mut gx) = (F::zero(), F::zero());
            for ch in 0..c {
                let gi = g[i * c + ch];
                let plane = &fd[ch * hw..];
                for k in 0..4 {
                    gy += gi * b.dy[k] * plane[b.idx[k]];
                    gx += gi * b.dx[k] * plane[b.idx[k]];
                }
            }
            gp[2 * i] += gx;
            gp[2 * i + 1] += gy;
        }
    }
}

pub(crate) fn roi_align_backward<F: Float>(
    feat: Var,
    boxes: Var,
    cfg: &RoiAlignCfg,
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let (fv, bv) = (sink.value(feat), sink.value(boxes));
    let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
    let hw = h * w;
    let (p, s) = (cfg.pool, cfg.sampling);
    let pp = p * p;
    let norm = F::lit(1.0 / (s * s) as f64);
    let scale = F::lit(cfg.spatial_scale);
    let fd = fv.data();
    let want_feat = sink.wants(feat);
    let want_boxes = sink.wants(boxes);
    let mut gfeat = if want_feat { vec![F::zero(); fv.len()] } else { Vec::new() };
    let mut gboxes = vec![F::zero(); bv.len()];
    let mut samples = Vec::with_capacity(pp * s * s);
    let mut gyx: Vec<(F, F)> = Vec::with_capacity(pp * s * s);
    for (bi, bx) in bv.data().chunks(4).enumerate() {
        box_samples(bx, cfg, h, w, &mut samples);
        gyx.clear();
        gyx.resize(samples.len(), (F::zero(), F::zero()));
        for (ch, grow) in g[bi * c * pp..(bi + 1) * c * pp].chunks_exact(pp).enumerate() {
            if grow.iter().all(|&x| x == F::zero()) {
                continue;
            }
            let plane = &fd[ch * hw..(ch + 1) * hw];
            let gplane: &mut [F] = if want_feat { &mut gfeat[ch * hw..(ch + 1) * hw] } else { &mut [] };
            for (sm, acc) in samples.iter().zip(gyx.iter_mut()) {
                let go = grow[sm.bin] * norm;
                let b = &sm.b;
                if want_feat {
                    for k in 0..4 {
                        gplane[b.idx[k]] += go * b.w[k];
                    }
                }
                if want_boxes {
                    let v = [plane[b.idx[0]], plane[b.idx[1]], plane[b.idx[2]], plane[b.idx[3]]];
                    acc.0 += go * (b.dy[0] * v[0] + b.dy[1] * v[1] + b.dy[2] * v[2] + b.dy[3] * v[3]);
                    acc.1 += go * (b.dx[0] * v[0] + b.dx[1] * v[1] + b.dx[2] * v[2] + b.dx[3] * v[3]);
                }
            }
        }
        let gb = &mut gboxes[bi * 4..bi * 4 + 4];
        for (sm, &(gy, gx)) in samples.iter().zip(&gyx) {
            gb[0] += gx * scale * (F::one() - sm.tx);
            gb[2] += gx * scale * sm.tx;
            gb[1] += gy * scale * (F::one() - sm.ty);
            gb[3] += gy * scale * sm.ty;
        }
    }
    if want_feat {
        for (d, v) in sink.slot(feat).iter_mut().zip(gfeat) {
            *d += v;
        }
    }
    if want_boxes {
        for (d, v) in sink.slot(boxes).iter_mut().zip(gboxes) {
            *d += v;
        }
    }
}
