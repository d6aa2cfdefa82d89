//! Wengert tape: every primitive application is appended to a linear list of
//! nodes; `backward` walks that list once in reverse.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::ops::elementwise::{BinaryKind, Bmap, UnaryKind};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    pub(crate) id: u32,
    pub(crate) tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id as usize
    }
}

pub(crate) enum Op<F> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var, amap: Bmap, bmap: Bmap },
    Unary { kind: UnaryKind, a: Var },
    Affine { a: Var, mul: F },
    Clamp { a: Var, lo: F, hi: F },
    Softmax { a: Var },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: crate::ops::conv::ConvGeom, cols: Vec<F> },
    Upsample2x { a: Var },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<F>, rstd: Vec<F> },
    GroupNorm { x: Var, g: Var, b: Var, groups: usize, xhat: Vec<F>, rstd: Vec<F> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, indices: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Cosine { a: Var, b: Var, an: Vec<F>, bn: Vec<F> },
    Bilinear { feat: Var, points: Var },
    RoiAlign { feat: Var, boxes: Var, cfg: crate::ops::sample::RoiAlignCfg },
    Focal { logits: Var, targets: Vec<F>, weights: Vec<F>, alpha: F, gamma: F },
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Records primitive applications so that gradients can be computed by
/// [`Tape::backward`]. Single-writer; drop it after the backward pass.
pub struct Tape<F> {
    id: u32,
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { id: (self.nodes.len() - 1) as u32, tape: self.id }
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.check(v).expect("var belongs to this tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(TensorError::Usage(format!("tensor #{} is not on this tape", v.id)));
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.index()].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { id: (self.nodes.len() - 1) as u32, tape: self.id })
    }

    /// Computes the gradient of the scalar `root` with respect to every leaf
    /// that requires a gradient. Each node is visited at most once.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        self.check(root)?;
        let rv = &self.nodes[root.index()].value;
        if rv.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(root.index() + 1, || None);
        grads[root.index()] = Some(vec![F::one()]);
        let mut out = HashMap::new();
        for i in (0..=root.index()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                out.insert(i, g);
                continue;
            }
            let mut sink = GradSink { grads: &mut grads, nodes: &self.nodes };
            crate::ops::backward(&node.op, &node.value, &g, &mut sink);
        }
        Ok(Gradients { tape: self.id, grads: out })
    }
}

pub(crate) fn op_inputs<F>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } | Op::Cosine { a, b, .. } => vec![*a, *b],
        Op::Unary { a, .. }
        | Op::Affine { a, .. }
        | Op::Clamp { a, .. }
        | Op::Softmax { a }
        | Op::Upsample2x { a }
        | Op::Reshape { a }
        | Op::Permute { a, .. }
        | Op::Slice { a, .. }
        | Op::IndexSelect { a, .. }
        | Op::Sum { a }
        | Op::Mean { a } => vec![*a],
        Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::LayerNorm { x, g, b, .. } | Op::GroupNorm { x, g, b, .. } => vec![*x, *g, *b],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Bilinear { feat, points } => vec![*feat, *points],
        Op::RoiAlign { feat, boxes, .. } => vec![*feat, *boxes],
        Op::Focal { logits, .. } => vec![*logits],
    }
}

/// Gradient accumulator handed to per-primitive backward rules.
pub(crate) struct GradSink<'a, F> {
    grads: &'a mut [Option<Vec<F>>],
    nodes: &'a [Node<F>],
}

impl<'a, F: Float> GradSink<'a, F> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    /// Forward value of `v`; the borrow is independent of the sink itself.
    pub(crate) fn value(&self, v: Var) -> &'a Tensor<F> {
        &self.nodes[v.index()].value
    }

    /// Gradient slot for `v`, zero-initialized on first use.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [F] {
        let n = self.nodes[v.index()].value.len();
        self.grads[v.index()].get_or_insert_with(|| vec![F::zero(); n])
    }

    /// Like `slot`, but also returns the forward value of `v` (split borrow).
    pub(crate) fn slot_with_value(&mut self, v: Var) -> (&mut [F], &Tensor<F>) {
        let value = &self.nodes[v.index()].value;
        let n = value.len();
        (self.grads[v.index()].get_or_insert_with(|| vec![F::zero(); n]), value)
    }
}

/// Result of [`Tape::backward`]: gradients of requires-grad leaves.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    tape: u32,
    grads: HashMap<usize, Vec<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.index()).map(|g| g.as_slice())
    }

    pub fn contains(&self, v: Var) -> bool {
        self.get(v).is_some()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.remove(&v.index())
    }
}
