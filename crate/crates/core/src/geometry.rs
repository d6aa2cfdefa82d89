//! Box algebra and multi-level RoI pooling.

use omdet_tensor::{Float, RoiAlignCfg, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxRepr {
    /// `[x1, y1, x2, y2]` in pixels.
    XyxyAbs,
    /// `[cx, cy, w, h]` as fractions of the image size.
    CxcywhNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub repr: BoxRepr,
    pub coords: [f64; 4],
}

impl BBox {
    pub fn xyxy(coords: [f64; 4]) -> Self {
        BBox { repr: BoxRepr::XyxyAbs, coords }
    }

    pub fn cxcywh(coords: [f64; 4]) -> Self {
        BBox { repr: BoxRepr::CxcywhNorm, coords }
    }

    /// Clamps to the valid range of the representation: the image rectangle
    /// for absolute boxes, `[0, 1]` per coordinate for normalized ones.
    pub fn clamped(self, image: (f64, f64)) -> Self {
        let c = self.coords;
        let coords = match self.repr {
            BoxRepr::XyxyAbs => clamp_xyxy(c, image.0, image.1),
            BoxRepr::CxcywhNorm => c.map(|v| v.clamp(0.0, 1.0)),
        };
        BBox { repr: self.repr, coords }
    }
}

pub fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// IoU of two xyxy boxes; 0 when the union is empty.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = area([a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU of two xyxy boxes; 0 when the enclosing box is empty.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let enclose = area([a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]);
    if enclose <= 0.0 {
        return 0.0;
    }
    let inter = area([a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(a) + area(b) - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    // enclose >= union exactly; rounding can leave a tiny negative residue
    iou - (enclose - union).max(0.0) / enclose
}

pub fn clamp_xyxy(b: [f64; 4], w: f64, h: f64) -> [f64; 4] {
    [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)]
}

pub fn xyxy_to_cxcywh(b: [f64; 4], w: f64, h: f64) -> [f64; 4] {
    [(b[0] + b[2]) / (2.0 * w), (b[1] + b[3]) / (2.0 * h), (b[2] - b[0]) / w, (b[3] - b[1]) / h]
}

pub fn cxcywh_to_xyxy(b: [f64; 4], w: f64, h: f64) -> [f64; 4] {
    [(b[0] - b[2] / 2.0) * w, (b[1] - b[3] / 2.0) * h, (b[0] + b[2] / 2.0) * w, (b[1] + b[3] / 2.0) * h]
}

pub fn box_convert(b: BBox, target: BoxRepr, image: (f64, f64)) -> Result<BBox> {
    let (w, h) = image;
    if !(w > 0.0 && h > 0.0) {
        return Err(config(format!("image size must be positive, got {w}x{h}")));
    }
    let coords = match (b.repr, target) {
        (BoxRepr::XyxyAbs, BoxRepr::CxcywhNorm) => xyxy_to_cxcywh(b.coords, w, h),
        (BoxRepr::CxcywhNorm, BoxRepr::XyxyAbs) => cxcywh_to_xyxy(b.coords, w, h),
        _ => b.coords,
    };
    Ok(BBox { repr: target, coords })
}

/// FPN level for a box of size `w`×`h` pixels:
/// `clamp(floor(4 + log2(sqrt(w*h) / canonical)), 2, 5)`.
pub fn fpn_level(w: f64, h: f64, canonical: f64) -> usize {
    let s = (w.max(0.0) * h.max(0.0)).sqrt();
    if s <= 0.0 {
        return 2;
    }
    (4.0 + (s / canonical).log2()).floor().clamp(2.0, 5.0) as usize
}

fn cxcywh_matrix<F: Float>() -> Tensor<F> {
    // rows: cx, cy, w, h; columns: x1, y1, x2, y2
    Tensor::from_f64(
        vec![4, 4],
        &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, -0.5, 0.0, 0.5, 0.0, 0.0, -0.5, 0.0, 0.5],
    )
    .expect("4x4")
}

/// `[M, 4]` cxcywh → `[M, 4]` xyxy in the same units.
pub fn cxcywh_to_xyxy_var<F: Float>(tape: &mut Tape<F>, b: Var) -> Result<Var> {
    let m = tape.constant(cxcywh_matrix());
    Ok(tape.matmul(b, m)?)
}

/// Normalized cxcywh `[N, 4]` → absolute xyxy clamped to the image.
pub fn decode_boxes<F: Float>(tape: &mut Tape<F>, b: Var, w: f64, h: f64) -> Result<Var> {
    let x = cxcywh_to_xyxy_var(tape, b)?;
    let x = tape.clamp(x, F::zero(), F::one())?;
    let s = tape.constant(Tensor::from_f64(vec![4], &[w, h, w, h])?);
    Ok(tape.mul(x, s)?)
}

/// Row-wise GIoU of two `[M, 4]` xyxy tensors, as `[M, 1]`. `eps` keeps the
/// divisions finite for degenerate pairs (which then score 0).
pub fn giou_var<F: Float>(tape: &mut Tape<F>, a: Var, b: Var, eps: f64) -> Result<Var> {
    let col = |t: &mut Tape<F>, x: Var, j: usize| t.slice(x, 1, j, j + 1);
    let (ax1, ay1, ax2, ay2) = (col(tape, a, 0)?, col(tape, a, 1)?, col(tape, a, 2)?, col(tape, a, 3)?);
    let (bx1, by1, bx2, by2) = (col(tape, b, 0)?, col(tape, b, 1)?, col(tape, b, 2)?, col(tape, b, 3)?);
    let side = |t: &mut Tape<F>, hi: Var, lo: Var| -> Result<Var> {
        let d = t.sub(hi, lo)?;
        Ok(t.relu(d)?)
    };

    let ix1 = tape.maximum(ax1, bx1)?;
    let iy1 = tape.maximum(ay1, by1)?;
    let ix2 = tape.minimum(ax2, bx2)?;
    let iy2 = tape.minimum(ay2, by2)?;
    let iw = side(tape, ix2, ix1)?;
    let ih = side(tape, iy2, iy1)?;
    let inter = tape.mul(iw, ih)?;

    let aw = side(tape, ax2, ax1)?;
    let ah = side(tape, ay2, ay1)?;
    let area_a = tape.mul(aw, ah)?;
    let bw = side(tape, bx2, bx1)?;
    let bh = side(tape, by2, by1)?;
    let area_b = tape.mul(bw, bh)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;

    let cx1 = tape.minimum(ax1, bx1)?;
    let cy1 = tape.minimum(ay1, by1)?;
    let cx2 = tape.maximum(ax2, bx2)?;
    let cy2 = tape.maximum(ay2, by2)?;
    let cw = side(tape, cx2, cx1)?;
    let ch = side(tape, cy2, cy1)?;
    let enclose = tape.mul(cw, ch)?;

    let e = F::lit(eps);
    let union_e = tape.affine(union, F::one(), e)?;
    let iou = tape.div(inter, union_e)?;
    let empty = tape.sub(enclose, union)?;
    let enclose_e = tape.affine(enclose, F::one(), e)?;
    let frac = tape.div(empty, enclose_e)?;
    Ok(tape.sub(iou, frac)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolCfg {
    /// Output grid side P.
    pub pool: usize,
    /// Sub-samples per bin side.
    pub sampling: usize,
    /// Box side (pixels) that maps to level 4.
    pub canonical: f64,
}

impl Default for PoolCfg {
    fn default() -> Self {
        PoolCfg { pool: 7, sampling: 2, canonical: 224.0 }
    }
}

/// RoIAlign over an FPN. `levels[i]` is level `2 + i` (stride `2^(2+i)`),
/// each `[C, H, W]`; `boxes` are `[N, 4]` absolute xyxy. Returns
/// `[N, C, P, P]`, differentiable in both features and boxes.
pub fn pyramid_roi_align<F: Float>(tape: &mut Tape<F>, levels: &[Var], boxes: Var, cfg: PoolCfg) -> Result<Var> {
    if cfg.pool == 0 || cfg.sampling == 0 {
        return Err(config("roi_align: pool and sampling must be >= 1"));
    }
    if levels.is_empty() {
        return Err(config("roi_align: empty feature pyramid"));
    }
    let channels = tape.shape(levels[0])[0];
    let values = tape.value(boxes).to_f64_vec();
    let n = values.len() / 4;
    if n == 0 {
        return Ok(tape.constant(Tensor::zeros(vec![0, channels, cfg.pool, cfg.pool])));
    }
    let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); levels.len()];
    for i in 0..n {
        let b = &values[4 * i..4 * i + 4];
        let l = fpn_level(b[2] - b[0], b[3] - b[1], cfg.canonical);
        by_level[(l - 2).min(levels.len() - 1)].push(i);
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(n);
    for (li, idx) in by_level.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let sel = if idx.len() == n { boxes } else { tape.index_select(boxes, idx)? };
        let roi = RoiAlignCfg {
            pool: cfg.pool,
            sampling: cfg.sampling,
            spatial_scale: 1.0 / f64::from(1u32 << (li + 2)),
            aligned: true,
        };
        parts.push(tape.roi_align(levels[li], sel, roi)?);
        order.extend_from_slice(idx);
    }
    let pooled = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return Ok(pooled);
    }
    let mut inverse = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos;
    }
    Ok(tape.index_select(pooled, &inverse)?)
}
