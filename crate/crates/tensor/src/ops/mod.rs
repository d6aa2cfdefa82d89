pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
pub(crate) mod loss;
pub(crate) mod norm;
pub(crate) mod sample;
pub(crate) mod shape;
pub(crate) mod sim;

use crate::float::Float;
use crate::tape::{GradSink, Op};
use crate::tensor::Tensor;

/// Dispatches the vector-Jacobian product of one recorded primitive.
pub(crate) fn backward<F: Float>(op: &Op<F>, out: &Tensor<F>, g: &[F], sink: &mut GradSink<'_, F>) {
    match op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, amap, bmap } => elementwise::binary_backward(*kind, *a, *b, amap, bmap, g, sink),
        Op::Unary { kind, a } => elementwise::unary_backward(*kind, *a, out, g, sink),
        Op::Affine { a, mul } => elementwise::affine_backward(*a, *mul, g, sink),
        Op::Clamp { a, lo, hi } => elementwise::clamp_backward(*a, *lo, *hi, g, sink),
        Op::Softmax { a } => elementwise::softmax_backward(*a, out, g, sink),
        Op::MatMul { a, b, ta, tb, batch, m, k, n, b_shared } => {
            linalg::matmul_backward(*a, *b, *ta, *tb, *batch, (*m, *k, *n), *b_shared, g, sink)
        }
        Op::Linear { x, w, b } => linalg::linear_backward(*x, *w, *b, g, sink),
        Op::Conv2d { x, w, b, geom, cols } => conv::conv2d_backward(*x, *w, *b, geom, cols, g, sink),
        Op::Upsample2x { a } => conv::upsample_backward(*a, g, sink),
        Op::LayerNorm { x, g: gv, b, xhat, rstd } => norm::layer_norm_backward(*x, *gv, *b, xhat, rstd, g, sink),
        Op::GroupNorm { x, g: gv, b, groups, xhat, rstd } => {
            norm::group_norm_backward(*x, *gv, *b, *groups, xhat, rstd, g, sink)
        }
        Op::Reshape { a } => shape::reshape_backward(*a, g, sink),
        Op::Permute { a, perm } => shape::permute_backward(*a, perm, g, sink),
        Op::Concat { inputs, axis } => shape::concat_backward(inputs, *axis, g, sink),
        Op::Slice { a, axis, start } => shape::slice_backward(*a, *axis, *start, out.shape(), g, sink),
        Op::IndexSelect { a, indices } => shape::index_select_backward(*a, indices, g, sink),
        Op::Sum { a } => shape::sum_backward(*a, F::one(), g, sink),
        Op::Mean { a } => {
            let n = sink.value(*a).len();
            shape::sum_backward(*a, F::one() / F::lit(n as f64), g, sink)
        }
        Op::Cosine { a, b, an, bn } => sim::cosine_backward(*a, *b, an, bn, g, sink),
        Op::Bilinear { feat, points } => sample::bilinear_backward(*feat, *points, g, sink),
        Op::RoiAlign { feat, boxes, cfg } => sample::roi_align_backward(*feat, *boxes, cfg, g, sink),
        Op::Focal { logits, targets, weights, alpha, gamma } => {
            loss::focal_backward(*logits, targets, weights, *alpha, *gamma, g, sink)
        }
    }
}
