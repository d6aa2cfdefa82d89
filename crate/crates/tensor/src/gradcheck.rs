//! Central-difference verification of tape gradients (run in f64).
//!
//! Numeric derivatives use the fourth-order central stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, which allows a larger
//! step and so a lower round-off floor than the two-point rule.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn eval_scalar<Fun>(f: &Fun, points: &[Tensor<f64>]) -> Result<f64>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(TensorError::Usage(format!("gradient check needs a scalar, got {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "gradient_check" });
    }
    Ok(v)
}

fn analytic<Fun>(f: &Fun, points: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let y = f(&mut tape, &vars)?;
    if !tape.value(y).item().is_finite() {
        return Err(TensorError::NonFinite { op: "gradient_check" });
    }
    let grads = tape.backward(y)?;
    Ok(vars
        .iter()
        .zip(points)
        .map(|(&v, p)| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect())
}

fn stencil(h: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum over coordinates of the relative error between the tape gradient
/// of scalar `f` at `point` and its central difference with step `eps`.
pub fn gradient_check<Fun>(f: Fun, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let wrapped = |t: &mut Tape<f64>, v: &[Var]| f(t, v[0]);
    gradient_check_multi(wrapped, std::slice::from_ref(point), eps).map(|errs| errs[0])
}

/// Per-input maximum coordinate-wise relative error for a function of
/// several tensors.
pub fn gradient_check_multi<Fun>(f: Fun, points: &[Tensor<f64>], eps: f64) -> Result<Vec<f64>>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TensorError::Usage("gradient_check: eps must be > 0".into()));
    }
    let grads = analytic(&f, points)?;
    let mut errors = Vec::with_capacity(points.len());
    for (pi, point) in points.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..point.len() {
            let numeric = stencil(eps, |h| {
                let mut shifted = points.to_vec();
                shifted[pi].data_mut()[i] += h;
                eval_scalar(&f, &shifted)
            })?;
            worst = worst.max(relative_error(grads[pi][i], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}

/// Directional variant for large inputs: for each input `i`, compares
/// `⟨∇_i f, dir_i⟩` with the central difference of `f` along `dir_i`.
pub fn directional_check<Fun>(
    f: Fun,
    points: &[Tensor<f64>],
    directions: &[Tensor<f64>],
    eps: f64,
) -> Result<Vec<f64>>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || directions.len() != points.len() {
        return Err(TensorError::Usage("directional_check: need eps > 0 and one direction per input".into()));
    }
    let grads = analytic(&f, points)?;
    let mut errors = Vec::with_capacity(points.len());
    for (pi, dir) in directions.iter().enumerate() {
        let a: f64 = grads[pi].iter().zip(dir.data()).map(|(g, d)| g * d).sum();
        let numeric = stencil(eps, |h| {
            let mut shifted = points.to_vec();
            for (x, d) in shifted[pi].data_mut().iter_mut().zip(dir.data()) {
                *x += h * d;
            }
            eval_scalar(&f, &shifted)
        })?;
        errors.push(relative_error(a, numeric));
    }
    Ok(errors)
}
