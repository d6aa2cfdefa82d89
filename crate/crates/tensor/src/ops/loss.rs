use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::ops::elementwise::{sigmoid, softplus};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// Per-element sigmoid focal loss and its derivative with respect to the logit.
///
/// `-α_t (1-p_t)^γ log(p_t)` with `p = sigmoid(x)`, evaluated through
/// softplus so that large |x| never produces `log(0)`.
pub fn focal_term<F: Float>(x: F, target: F, alpha: F, gamma: F) -> (F, F) {
    let p = sigmoid(x);
    let one = F::one();
    let pos = {
        let q = one - p;
        let sp = softplus(-x); // -log p
        let qg = pow(q, gamma);
        let loss = alpha * qg * sp;
        // d/dx [(1-p)^γ softplus(-x)] = (1-p)^γ [ -γ p softplus(-x) - (1-p) ]
        let grad = alpha * qg * (-gamma * p * sp - q);
        (loss, grad)
    };
    let neg = {
        let sp = softplus(x); // -log(1-p)
        let pg = pow(p, gamma);
        let loss = (one - alpha) * pg * sp;
        let grad = (one - alpha) * pg * (gamma * (one - p) * sp + p);
        (loss, grad)
    };
    (
        target * pos.0 + (one - target) * neg.0,
        target * pos.1 + (one - target) * neg.1,
    )
}

#[inline]
fn pow<F: Float>(base: F, e: F) -> F {
    if e == F::zero() {
        F::one()
    } else if e == F::lit(2.0) {
        base * base
    } else {
        base.powf(e)
    }
}

impl<F: Float> Tape<F> {
    /// Weighted sum of sigmoid focal losses over all elements of `logits`.
    /// `targets` are 0/1; `weights` (typically a 0/1 mask) scale each term.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &[F],
        weights: &[F],
        alpha: F,
        gamma: F,
    ) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        if targets.len() != lv.len() || weights.len() != lv.len() {
            return Err(TensorError::shape(
                "focal_loss",
                format!("logits {:?}, {} targets, {} weights", lv.shape(), targets.len(), weights.len()),
            ));
        }
        let total = lv
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .filter(|(_, &w)| w != F::zero())
            .map(|((&x, &t), &w)| w * focal_term(x, t, alpha, gamma).0)
            .sum();
        let op = Op::Focal { logits, targets: targets.to_vec(), weights: weights.to_vec(), alpha, gamma };
        self.push("focal_loss", Tensor::scalar(total), op)
    }
}

pub(crate) fn focal_backward<F: Float>(
    logits: Var,
    targets: &[F],
    weights: &[F],
    alpha: F,
    gamma: F,
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    if !sink.wants(logits) {
        return;
    }
    let (gl, lv) = sink.slot_with_value(logits);
    for i in 0..targets.len() {
        if weights[i] != F::zero() {
            gl[i] += g[0] * weights[i] * focal_term(lv.data()[i], targets[i], alpha, gamma).1;
        }
    }
}
