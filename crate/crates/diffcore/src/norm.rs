use crate::error::{shape_err, DiffError, Result};
use crate::tape::{Grads, Op};
use crate::{Scalar, Tape, Tensor, Var};

/// Per-channel statistics of one training-mode batch-norm call.
///
/// `var` is the unbiased estimate, which is what running statistics track.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn layout<T: Scalar>(tape: &Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
    let shape = tape.shape(x);
    if shape.len() < 2 {
        return Err(shape_err("batch_norm", format!("need [N, C, ...], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let inner = shape[2..].iter().product();
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(shape_err("batch_norm", format!("affine parameters must be [{c}]")));
    }
    Ok((n, c, inner))
}

impl<T: Scalar> Tape<T> {
    /// Normalises each channel over batch and spatial axes, then applies
    /// `gamma · x̂ + beta`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner) = layout(self, x, gamma, beta)?;
        let count = n * inner;
        if count < 2 {
            return Err(DiffError::Degenerate {
                op: "batch_norm",
                detail: format!("{count} element(s) per channel in training mode"),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let inv_count = T::one() / T::from_f64(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            // Shifted by the first sample so that a constant channel gives
            // exactly zero deviations.
            let shift = xv[ci * inner];
            let mut s = T::zero();
            for b in 0..n {
                s += xv[(b * c + ci) * inner..][..inner].iter().map(|&v| v - shift).sum::<T>();
            }
            let ms = s * inv_count;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xv[(b * c + ci) * inner..][..inner] {
                    let d = (v - shift) - ms;
                    sq += d * d;
                }
            }
            mean[ci] = shift + ms;
            var[ci] = sq * inv_count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ci in 0..c {
                let off = (b * c + ci) * inner;
                for i in off..off + inner {
                    let h = ((xv[i] - xv[ci * inner]) - (mean[ci] - xv[ci * inner])) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gv[ci] * h + bv[ci];
                }
            }
        }
        let unbiased = T::from_f64(count as f64 / (count as f64 - 1.0));
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: true,
            outer: n,
            channels: c,
            inner,
        };
        let v = self.push("batch_norm", value, op, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, inner) = layout(self, x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm", "running statistics length mismatch"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ci in 0..c {
                let off = (b * c + ci) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - running_mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gv[ci] * h + bv[ci];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: false,
            outer: n,
            channels: c,
            inner,
        };
        self.push("batch_norm", value, op, &[x, gamma, beta])
    }
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    [x, gamma, beta]: [Var; 3],
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    (n, c, inner): (usize, usize, usize),
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * inner;
            for i in off..off + inner {
                sum_g[ci] += g[i];
                sum_gx[ci] += g[i] * xhat[i];
            }
        }
    }
    if grads.wants(gamma) {
        grads.slot(gamma).iter_mut().zip(&sum_gx).for_each(|(a, &v)| *a += v);
    }
    if grads.wants(beta) {
        grads.slot(beta).iter_mut().zip(&sum_g).for_each(|(a, &v)| *a += v);
    }
    if !grads.wants(x) {
        return;
    }
    let gv = grads.value(gamma).data();
    let m = T::from_f64((n * inner) as f64);
    let gx = grads.slot(x);
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * inner;
            let scale = gv[ci] * inv_std[ci];
            if train {
                let k = scale / m;
                for i in off..off + inner {
                    gx[i] += k * (m * g[i] - sum_g[ci] - xhat[i] * sum_gx[ci]);
                }
            } else {
                for i in off..off + inner {
                    gx[i] += scale * g[i];
                }
            }
        }
    }
}
