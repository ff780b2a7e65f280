use crate::error::{shape_err, DiffError, Result};
use crate::tape::{Grads, Op};
use crate::{Scalar, Tape, Tensor, Var};

impl<T: Scalar> Tape<T> {
    /// Mean Huber loss over masked elements; quadratic below `beta`.
    pub fn masked_smooth_l1(&mut self, x: Var, target: &Tensor<T>, mask: &[bool], beta: T) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() || mask.len() != xv.numel() {
            return Err(shape_err(
                "masked_smooth_l1",
                format!("prediction {:?}, target {:?}, mask {}", xv.shape(), target.shape(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(DiffError::Empty { op: "masked_smooth_l1" });
        }
        let half = T::from_f64(0.5);
        let mut total = T::zero();
        for ((&p, &t), &m) in xv.data().iter().zip(target.data()).zip(mask) {
            if m {
                let d = (p - t).abs();
                total += if d < beta { half * d * d / beta } else { d - half * beta };
            }
        }
        let value = Tensor::scalar(total / T::from_f64(count as f64));
        let op = Op::SmoothL1 {
            x,
            target: target.data().to_vec(),
            mask: mask.to_vec(),
            beta,
            count,
        };
        self.push("masked_smooth_l1", value, op, &[x])
    }

    /// Mean of `1 - ⟨pred, target⟩` over masked pixels of `[3,H,W]` maps.
    pub fn masked_cosine_loss(&mut self, x: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() != 3 || shape[0] != 3 || target.shape() != shape || mask.len() != shape[1] * shape[2] {
            return Err(shape_err(
                "masked_cosine_loss",
                format!("prediction {shape:?}, target {:?}, mask {}", target.shape(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(DiffError::Empty { op: "masked_cosine_loss" });
        }
        let plane = mask.len();
        let (p, t) = (xv.data(), target.data());
        let mut total = T::zero();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let dot = p[i] * t[i] + p[plane + i] * t[plane + i] + p[2 * plane + i] * t[2 * plane + i];
            total += T::one() - dot;
        }
        let value = Tensor::scalar(total / T::from_f64(count as f64));
        let op = Op::Cosine {
            x,
            target: t.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        self.push("masked_cosine_loss", value, op, &[x])
    }
}

pub(crate) fn smooth_l1_backward<T: Scalar>(
    x: Var,
    target: &[T],
    mask: &[bool],
    beta: T,
    count: usize,
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    if !grads.wants(x) {
        return;
    }
    let xv = grads.value(x).data();
    let k = g[0] / T::from_f64(count as f64);
    let gx = grads.slot(x);
    for i in 0..xv.len() {
        if !mask[i] {
            continue;
        }
        let d = xv[i] - target[i];
        let dd = if d.abs() < beta { d / beta } else { d.signum() };
        gx[i] += k * dd;
    }
}

pub(crate) fn cosine_backward<T: Scalar>(
    x: Var,
    target: &[T],
    mask: &[bool],
    count: usize,
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    if !grads.wants(x) {
        return;
    }
    let plane = mask.len();
    let k = g[0] / T::from_f64(count as f64);
    let gx = grads.slot(x);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..3 {
            gx[c * plane + i] -= k * target[c * plane + i];
        }
    }
}
