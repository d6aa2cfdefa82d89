use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{numel, Tensor};

/// For each output linear index of a permuted tensor, the input linear index.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(in_shape);
    let mut map = Vec::with_capacity(n);
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            index[d] += 1;
            off += strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * index[d];
            index[d] = 0;
        }
    }
    map
}

impl<F: Float> Tape<F> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { a })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let s = av.shape();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::shape("permute", format!("{s:?} by {perm:?}")));
        }
        let map = permute_map(s, perm);
        let d = av.data();
        let out = map.iter().map(|&i| d[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        let value = Tensor::from_parts(shape, out);
        self.push("permute", value, Op::Permute { a, perm: perm.to_vec() })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        self.push("concat", value, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(TensorError::shape("slice", format!("{s:?} axis {axis} range {start}..{end}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let len = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * len);
        for o in 0..outer {
            let off = (o * s[axis] + start) * inner;
            out.extend_from_slice(&av.data()[off..off + len]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        let value = Tensor::from_parts(shape, out);
        self.push("slice", value, Op::Slice { a, axis, start })
    }

    /// Gathers rows (axis 0) by index; indices may repeat.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let s = av.shape();
        if s.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(TensorError::shape("index_select", format!("{s:?} with indices {indices:?}")));
        }
        let row = numel(&s[1..]);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&av.data()[i * row..(i + 1) * row]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        let value = Tensor::from_parts(shape, out);
        self.push("index_select", value, Op::IndexSelect { a, indices: indices.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().copied().sum::<F>();
        self.push("sum", Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if av.is_empty() {
            return Err(TensorError::shape("mean", "empty tensor"));
        }
        let s = av.data().iter().copied().sum::<F>() / F::lit(av.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean { a })
    }
}

pub(crate) fn reshape_backward<F: Float>(a: Var, g: &[F], sink: &mut GradSink<'_, F>) {
    if sink.wants(a) {
        for (s, &gi) in sink.slot(a).iter_mut().zip(g) {
            *s += gi;
        }
    }
}

pub(crate) fn permute_backward<F: Float>(a: Var, perm: &[usize], g: &[F], sink: &mut GradSink<'_, F>) {
    if sink.wants(a) {
        let (ga, av) = sink.slot_with_value(a);
        let map = permute_map(av.shape(), perm);
        for (&i, &gi) in map.iter().zip(g) {
            ga[i] += gi;
        }
    }
}

pub(crate) fn concat_backward<F: Float>(inputs: &[Var], axis: usize, g: &[F], sink: &mut GradSink<'_, F>) {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|&v| sink.value(v).shape().to_vec()).collect();
    let base = &shapes[0];
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut col = 0;
    for (&v, s) in inputs.iter().zip(&shapes) {
        let len = s[axis] * inner;
        if sink.wants(v) {
            let gv = sink.slot(v);
            for o in 0..outer {
                let src = &g[o * total * inner + col..][..len];
                for (d, &x) in gv[o * len..(o + 1) * len].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        col += len;
    }
}

pub(crate) fn slice_backward<F: Float>(
    a: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[F],
    sink: &mut GradSink<'_, F>,
) {
    if !sink.wants(a) {
        return;
    }
    let (ga, av) = sink.slot_with_value(a);
    let s = av.shape();
    let outer = numel(&s[..axis]);
    let inner = numel(&s[axis + 1..]);
    let len = out_shape[axis] * inner;
    for o in 0..outer {
        let off = (o * s[axis] + start) * inner;
        for (d, &x) in ga[off..off + len].iter_mut().zip(&g[o * len..(o + 1) * len]) {
            *d += x;
        }
    }
}

pub(crate) fn index_select_backward<F: Float>(a: Var, indices: &[usize], g: &[F], sink: &mut GradSink<'_, F>) {
    if !sink.wants(a) {
        return;
    }
    let (ga, av) = sink.slot_with_value(a);
    let row = numel(&av.shape()[1..]);
    for (k, &i) in indices.iter().enumerate() {
        for (d, &x) in ga[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
            *d += x;
        }
    }
}

pub(crate) fn sum_backward<F: Float>(a: Var, scale: F, g: &[F], sink: &mut GradSink<'_, F>) {
    if sink.wants(a) {
        let v = g[0] * scale;
        sink.slot(a).iter_mut().for_each(|s| *s += v);
    }
}
