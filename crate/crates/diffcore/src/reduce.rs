//! Reductions, set-wise combinations and layout ops.

use crate::error::{shape_err, DiffError, Result};
use crate::tape::{Grads, Op};
use crate::tensor::split_axis;
use crate::{Scalar, Tape, Tensor, Var};

fn same_shapes<T: Scalar>(tape: &Tape<T>, op: &'static str, xs: &[Var]) -> Result<Vec<usize>> {
    let first = xs.first().ok_or(DiffError::Empty { op })?;
    let shape = tape.shape(*first).to_vec();
    for v in &xs[1..] {
        if tape.shape(*v) != shape.as_slice() {
            return Err(shape_err(op, format!("{:?} vs {:?}", tape.shape(*v), shape)));
        }
    }
    Ok(shape)
}

impl<T: Scalar> Tape<T> {
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(DiffError::Empty { op: "concat" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        let mut chunks = Vec::with_capacity(xs.len());
        let (outer, _, inner) = split_axis(&base, axis);
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &chunk) in xs.iter().zip(&chunks) {
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let op = Op::Concat {
            xs: xs.to_vec(),
            outer,
            chunks,
        };
        self.push("concat", value, op, xs)
    }

    /// Slice `index` of the leading axis, dropping that axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(shape_err("select", format!("index {index} for shape {shape:?}")));
        }
        let chunk: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * chunk..(index + 1) * chunk].to_vec();
        let value = Tensor::new(shape[1..].to_vec(), data)?;
        self.push("select", value, Op::Select { x, index, chunk }, &[x])
    }

    /// Elementwise maximum over a list of equally shaped tensors.
    ///
    /// The values are independent of list order. Ties route the gradient to
    /// the earliest input.
    pub fn elementwise_max(&mut self, xs: &[Var]) -> Result<Var> {
        let shape = same_shapes(self, "elementwise_max", xs)?;
        let mut data = self.value(xs[0]).data().to_vec();
        let mut arg = vec![0u32; data.len()];
        for (k, &v) in xs.iter().enumerate().skip(1) {
            for (i, &x) in self.value(v).data().iter().enumerate() {
                if x > data[i] {
                    data[i] = x;
                    arg[i] = k as u32;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        let op = Op::Max { xs: xs.to_vec(), arg };
        self.push("elementwise_max", value, op, xs)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |w: usize| (o * len + w) * inner + i;
                let m = (0..len).map(|w| xv[at(w)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for w in 0..len {
                    let e = (xv[at(w)] - m).exp();
                    out[at(w)] = e;
                    z += e;
                }
                for w in 0..len {
                    out[at(w)] = out[at(w)] / z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let op = Op::Softmax { x, outer, len, inner };
        self.push("softmax", value, op, &[x])
    }

    /// `Σ_w prob[.., w, ..] · values[.., w, ..]` contracting `axis`.
    pub fn weighted_sum(&mut self, prob: Var, values: Var, axis: usize) -> Result<Var> {
        let shape = same_shapes(self, "weighted_sum", &[prob, values])?;
        if axis >= shape.len() {
            return Err(DiffError::Axis {
                op: "weighted_sum",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let (pv, vv) = (self.value(prob).data(), self.value(values).data());
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for w in 0..len {
                let base = (o * len + w) * inner;
                for i in 0..inner {
                    out[o * inner + i] += pv[base + i] * vv[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let value = Tensor::new(oshape, out)?;
        let op = Op::WeightedSum {
            p: prob,
            v: values,
            outer,
            len,
            inner,
        };
        self.push("weighted_sum", value, op, &[prob, values])
    }

    /// Elementwise population variance across a set of tensors.
    pub fn variance_over_set(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() < 2 {
            return Err(shape_err("variance_over_set", format!("need ≥ 2 inputs, got {}", xs.len())));
        }
        let shape = same_shapes(self, "variance_over_set", xs)?;
        let k = T::from_f64(xs.len() as f64);
        let numel = self.value(xs[0]).numel();
        // Deviations are taken relative to the first input so that a set of
        // identical tensors yields exactly zero.
        let base = self.value(xs[0]).data();
        let mut mean = vec![T::zero(); numel];
        for &v in &xs[1..] {
            for ((m, &x), &b) in mean.iter_mut().zip(self.value(v).data()).zip(base) {
                *m += x - b;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / k);
        let mut var = vec![T::zero(); numel];
        for &v in xs {
            for (i, &x) in self.value(v).data().iter().enumerate() {
                let d = (x - base[i]) - mean[i];
                var[i] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / k);
        let value = Tensor::new(shape, var)?;
        self.push("variance_over_set", value, Op::Variance { xs: xs.to_vec() }, xs)
    }

    /// Inserts a new axis at `axis` holding `count` copies of `x`.
    pub fn repeat_axis(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(DiffError::Axis {
                op: "repeat_axis",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for _ in 0..count {
                data.extend_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        let mut oshape = shape;
        oshape.insert(axis, count);
        let value = Tensor::new(oshape, data)?;
        let op = Op::Repeat {
            x,
            outer,
            count,
            inner,
        };
        self.push("repeat_axis", value, op, &[x])
    }
}

pub(crate) fn sum_backward<T: Scalar>(x: Var, g: &[T], grads: &mut Grads<'_, T>) {
    if grads.wants(x) {
        let g0 = g[0];
        grads.slot(x).iter_mut().for_each(|s| *s += g0);
    }
}

pub(crate) fn concat_backward<T: Scalar>(
    xs: &[Var],
    outer: usize,
    chunks: &[usize],
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    let row: usize = chunks.iter().sum();
    let mut start = 0;
    for (&v, &chunk) in xs.iter().zip(chunks) {
        if grads.wants(v) {
            let gx = grads.slot(v);
            for o in 0..outer {
                let src = &g[o * row + start..o * row + start + chunk];
                gx[o * chunk..(o + 1) * chunk]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &b)| *a += b);
            }
        }
        start += chunk;
    }
}

pub(crate) fn select_backward<T: Scalar>(x: Var, index: usize, chunk: usize, g: &[T], grads: &mut Grads<'_, T>) {
    if grads.wants(x) {
        grads.slot(x)[index * chunk..(index + 1) * chunk]
            .iter_mut()
            .zip(g)
            .for_each(|(a, &b)| *a += b);
    }
}

pub(crate) fn max_backward<T: Scalar>(xs: &[Var], arg: &[u32], g: &[T], grads: &mut Grads<'_, T>) {
    for (k, &v) in xs.iter().enumerate() {
        if !grads.wants(v) {
            continue;
        }
        let gx = grads.slot(v);
        for (i, &a) in arg.iter().enumerate() {
            if a as usize == k {
                gx[i] += g[i];
            }
        }
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    x: Var,
    out: &Tensor<T>,
    (outer, len, inner): (usize, usize, usize),
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    if !grads.wants(x) {
        return;
    }
    let y = out.data();
    let gx = grads.slot(x);
    for o in 0..outer {
        for i in 0..inner {
            let at = |w: usize| (o * len + w) * inner + i;
            let dot: T = (0..len).map(|w| y[at(w)] * g[at(w)]).sum();
            for w in 0..len {
                gx[at(w)] += y[at(w)] * (g[at(w)] - dot);
            }
        }
    }
}

pub(crate) fn weighted_sum_backward<T: Scalar>(
    p: Var,
    v: Var,
    (outer, len, inner): (usize, usize, usize),
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    let (pv, vv) = (grads.value(p).data(), grads.value(v).data());
    for (target, other) in [(p, vv), (v, pv)] {
        if !grads.wants(target) {
            continue;
        }
        let gt = grads.slot(target);
        for o in 0..outer {
            for w in 0..len {
                let base = (o * len + w) * inner;
                for i in 0..inner {
                    gt[base + i] += g[o * inner + i] * other[base + i];
                }
            }
        }
    }
}

pub(crate) fn variance_backward<T: Scalar>(xs: &[Var], g: &[T], grads: &mut Grads<'_, T>) {
    let k = T::from_f64(xs.len() as f64);
    let numel = g.len();
    let mut mean = vec![T::zero(); numel];
    for &v in xs {
        for (m, &x) in mean.iter_mut().zip(grads.value(v).data()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / k);
    let two_over_k = T::from_f64(2.0) / k;
    for &v in xs {
        if !grads.wants(v) {
            continue;
        }
        let xv = grads.value(v).data();
        let gx = grads.slot(v);
        for i in 0..numel {
            gx[i] += g[i] * two_over_k * (xv[i] - mean[i]);
        }
    }
}

pub(crate) fn repeat_backward<T: Scalar>(
    x: Var,
    (outer, count, inner): (usize, usize, usize),
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    if !grads.wants(x) {
        return;
    }
    let gx = grads.slot(x);
    for o in 0..outer {
        for c in 0..count {
            let src = &g[(o * count + c) * inner..(o * count + c + 1) * inner];
            gx[o * inner..(o + 1) * inner]
                .iter_mut()
                .zip(src)
                .for_each(|(a, &b)| *a += b);
        }
    }
}
