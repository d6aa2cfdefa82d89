use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive score applied to masked keys; exp() of it underflows to exactly 0.
const MASKED_SCORE: f64 = -1e9;

/// Tape handles of one multi-head self-attention block. Linear weights are
/// `[d, d]` in `[out, in]` layout.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln_g: Var,
    pub ln_b: Var,
}

/// Position-free multi-head self-attention with a post-norm residual:
/// `LN(x + W_o · Attn(x))` for `x: [L, d]`.
///
/// `key_mask[j] == true` removes position `j` from every softmax.
pub fn mhsa<F: Float>(
    tape: &mut Tape<F>,
    x: Var,
    p: &AttentionVars,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(TensorError::shape("mhsa", format!("expected [L>=1, d], got {s:?}")));
    }
    let (len, d) = (s[0], s[1]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!("mhsa: model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let mut split = |w: Var, b: Var| -> Result<Var> {
        let y = tape.linear(x, w, Some(b))?;
        let y = tape.reshape(y, &[len, heads, dh])?;
        tape.permute(y, &[1, 0, 2])
    };
    let q = split(p.wq, p.bq)?;
    let k = split(p.wk, p.bk)?;
    let v = split(p.wv, p.bv)?;
    let scores = tape.matmul_t(q, k, false, true)?;
    let mut scores = tape.scale(scores, F::one() / F::lit(dh as f64).sqrt())?;
    if let Some(mask) = key_mask {
        if mask.len() != len {
            return Err(TensorError::shape("mhsa", format!("mask of {} for length {len}", mask.len())));
        }
        let add: Vec<F> = mask.iter().map(|&m| if m { F::lit(MASKED_SCORE) } else { F::zero() }).collect();
        let add = tape.constant(Tensor::new(vec![len], add)?);
        scores = tape.add(scores, add)?;
    }
    let att = tape.softmax(scores)?;
    let o = tape.matmul(att, v)?;
    let o = tape.permute(o, &[1, 0, 2])?;
    let o = tape.reshape(o, &[len, d])?;
    let o = tape.linear(o, p.wo, Some(p.bo))?;
    let r = tape.add(x, o)?;
    tape.layer_norm(r, p.ln_g, p.ln_b)
}
