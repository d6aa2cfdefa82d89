use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::ops::sample::RoiAlignCfg;
use crate::tape::{Tape, Var};

/// Identifier plus static attributes of a differentiable primitive, for
/// callers that dispatch generically (tests, gradient checks).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive<F> {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    MatMul { ta: bool, tb: bool },
    /// inputs: x, w, optional bias
    Linear,
    /// inputs: x, w, optional bias
    Conv2d { stride: usize, pad: usize },
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Abs,
    Exp,
    Affine { mul: F, add: F },
    Clamp { lo: F, hi: F },
    Softmax,
    /// inputs: x, gamma, beta
    LayerNorm,
    /// inputs: x, gamma, beta
    GroupNorm { groups: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
    IndexSelect { indices: Vec<usize> },
    Upsample2x,
    Sum,
    Mean,
    CosineSimilarity,
    BilinearSample,
    RoiAlign(RoiAlignCfg),
}

impl<F: Float> Primitive<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Maximum => "maximum",
            Primitive::Minimum => "minimum",
            Primitive::MatMul { .. } => "matmul",
            Primitive::Linear => "linear",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Abs => "abs",
            Primitive::Exp => "exp",
            Primitive::Affine { .. } => "affine",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::GroupNorm { .. } => "group_norm",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Permute { .. } => "permute",
            Primitive::IndexSelect { .. } => "index_select",
            Primitive::Upsample2x => "upsample2x",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::CosineSimilarity => "cosine_similarity",
            Primitive::BilinearSample => "bilinear_sample",
            Primitive::RoiAlign(_) => "roi_align",
        }
    }
}

impl<F: Float> Tape<F> {
    /// Applies `prim` to `inputs`, checking arity first.
    pub fn apply(&mut self, prim: &Primitive<F>, inputs: &[Var]) -> Result<Var> {
        let arity = |lo: usize, hi: usize| -> Result<()> {
            if inputs.len() < lo || inputs.len() > hi {
                return Err(TensorError::Usage(format!(
                    "{} takes {lo}..={hi} inputs, got {}",
                    prim.name(),
                    inputs.len()
                )));
            }
            Ok(())
        };
        match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::Maximum
            | Primitive::Minimum | Primitive::MatMul { .. } | Primitive::CosineSimilarity
            | Primitive::BilinearSample | Primitive::RoiAlign(_) => arity(2, 2)?,
            Primitive::Linear | Primitive::Conv2d { .. } => arity(2, 3)?,
            Primitive::LayerNorm | Primitive::GroupNorm { .. } => arity(3, 3)?,
            Primitive::Concat { .. } => arity(1, usize::MAX)?,
            _ => arity(1, 1)?,
        }
        let x = inputs[0];
        match prim {
            Primitive::Add => self.add(x, inputs[1]),
            Primitive::Sub => self.sub(x, inputs[1]),
            Primitive::Mul => self.mul(x, inputs[1]),
            Primitive::Div => self.div(x, inputs[1]),
            Primitive::Maximum => self.maximum(x, inputs[1]),
            Primitive::Minimum => self.minimum(x, inputs[1]),
            Primitive::MatMul { ta, tb } => self.matmul_t(x, inputs[1], *ta, *tb),
            Primitive::Linear => self.linear(x, inputs[1], inputs.get(2).copied()),
            Primitive::Conv2d { stride, pad } => self.conv2d(x, inputs[1], inputs.get(2).copied(), *stride, *pad),
            Primitive::Relu => self.relu(x),
            Primitive::Gelu => self.gelu(x),
            Primitive::Sigmoid => self.sigmoid(x),
            Primitive::Tanh => self.tanh(x),
            Primitive::Abs => self.abs(x),
            Primitive::Exp => self.exp(x),
            Primitive::Affine { mul, add } => self.affine(x, *mul, *add),
            Primitive::Clamp { lo, hi } => self.clamp(x, *lo, *hi),
            Primitive::Softmax => self.softmax(x),
            Primitive::LayerNorm => self.layer_norm(x, inputs[1], inputs[2]),
            Primitive::GroupNorm { groups } => self.group_norm(x, inputs[1], inputs[2], *groups),
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Slice { axis, start, end } => self.slice(x, *axis, *start, *end),
            Primitive::Reshape { shape } => self.reshape(x, shape),
            Primitive::Permute { perm } => self.permute(x, perm),
            Primitive::IndexSelect { indices } => self.index_select(x, indices),
            Primitive::Upsample2x => self.upsample2x(x),
            Primitive::Sum => self.sum(x),
            Primitive::Mean => self.mean(x),
            Primitive::CosineSimilarity => self.cosine_similarity(x, inputs[1]),
            Primitive::BilinearSample => self.bilinear_sample(x, inputs[1]),
            Primitive::RoiAlign(cfg) => self.roi_align(x, inputs[1], *cfg),
        }
    }
}
