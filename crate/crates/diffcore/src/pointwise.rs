use crate::error::{shape_err, Result};
use crate::tape::{Grads, Op};
use crate::{Scalar, Tape, Tensor, Var};

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * k);
        self.push("scale", value, Op::Scale { x, k }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Zeroes every element whose position (taken modulo `keep.len()`) is
    /// not kept. With `x [Ns,H,W]` and `keep [H·W]` this masks pixels.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if keep.is_empty() || xv.numel() % keep.len() != 0 {
            return Err(shape_err(
                "mask_fill",
                format!("mask of {} does not tile {:?}", keep.len(), xv.shape()),
            ));
        }
        let period = keep.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep[i % period] { v } else { T::zero() })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("mask_fill", value, Op::MaskFill { x, keep }, &[x])
    }

    /// Normalises 3-vectors stored along the channel axis of `[3,H,W]` or
    /// `[N,3,H,W]` to unit length.
    ///
    /// With `facing` the z component is replaced by `-|z|` first, so every
    /// output points towards a camera looking down `+z`. Zero-length vectors
    /// map to `(0, 0, -1)`.
    pub fn unit_normals(&mut self, x: Var, facing: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        if rank < 3 || shape[rank - 3] != 3 {
            return Err(shape_err("unit_normals", format!("need [..,3,H,W], got {shape:?}")));
        }
        let plane = shape[rank - 2] * shape[rank - 1];
        let batch = shape[..rank - 3].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut norms = vec![T::zero(); batch * plane];
        let tiny = T::from_f64(1e-12);
        for b in 0..batch {
            let base = b * 3 * plane;
            for p in 0..plane {
                let (i0, i1, i2) = (base + p, base + plane + p, base + 2 * plane + p);
                let z = if facing { -xv[i2].abs() } else { xv[i2] };
                let n = (xv[i0] * xv[i0] + xv[i1] * xv[i1] + z * z).sqrt();
                norms[b * plane + p] = n;
                if n > tiny {
                    out[i0] = xv[i0] / n;
                    out[i1] = xv[i1] / n;
                    out[i2] = z / n;
                } else {
                    out[i2] = -T::one();
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let op = Op::UnitNormals {
            x,
            norms,
            facing,
            batch,
            plane,
        };
        self.push("unit_normals", value, op, &[x])
    }
}

pub(crate) fn relu_backward<T: Scalar>(x: Var, out: &Tensor<T>, g: &[T], grads: &mut Grads<'_, T>) {
    if !grads.wants(x) {
        return;
    }
    let gx = grads.slot(x);
    for ((a, &o), &gi) in gx.iter_mut().zip(out.data()).zip(g) {
        if o > T::zero() {
            *a += gi;
        }
    }
}

pub(crate) fn add_backward<T: Scalar>(a: Var, b: Var, g: &[T], grads: &mut Grads<'_, T>) {
    for v in [a, b] {
        if grads.wants(v) {
            grads.slot(v).iter_mut().zip(g).for_each(|(s, &gi)| *s += gi);
        }
    }
}

pub(crate) fn mul_backward<T: Scalar>(a: Var, b: Var, g: &[T], grads: &mut Grads<'_, T>) {
    let (va, vb) = (grads.value(a).data(), grads.value(b).data());
    if grads.wants(a) {
        let ga = grads.slot(a);
        for i in 0..g.len() {
            ga[i] += g[i] * vb[i];
        }
    }
    if grads.wants(b) {
        let gb = grads.slot(b);
        for i in 0..g.len() {
            gb[i] += g[i] * va[i];
        }
    }
}

pub(crate) fn scale_backward<T: Scalar>(x: Var, k: T, g: &[T], grads: &mut Grads<'_, T>) {
    if grads.wants(x) {
        grads.slot(x).iter_mut().zip(g).for_each(|(s, &gi)| *s += gi * k);
    }
}

pub(crate) fn reshape_backward<T: Scalar>(x: Var, g: &[T], grads: &mut Grads<'_, T>) {
    if grads.wants(x) {
        grads.slot(x).iter_mut().zip(g).for_each(|(s, &gi)| *s += gi);
    }
}

pub(crate) fn mask_fill_backward<T: Scalar>(x: Var, keep: &[bool], g: &[T], grads: &mut Grads<'_, T>) {
    if !grads.wants(x) {
        return;
    }
    let period = keep.len();
    for (i, (s, &gi)) in grads.slot(x).iter_mut().zip(g).enumerate() {
        if keep[i % period] {
            *s += gi;
        }
    }
}

pub(crate) fn unit_normals_backward<T: Scalar>(
    x: Var,
    out: &Tensor<T>,
    norms: &[T],
    facing: bool,
    (batch, plane): (usize, usize),
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    if !grads.wants(x) {
        return;
    }
    let xv = grads.value(x).data();
    let y = out.data();
    let tiny = T::from_f64(1e-12);
    let gx = grads.slot(x);
    for b in 0..batch {
        let base = b * 3 * plane;
        for p in 0..plane {
            let n = norms[b * plane + p];
            if n <= tiny {
                continue;
            }
            let idx = [base + p, base + plane + p, base + 2 * plane + p];
            let dot: T = idx.iter().map(|&i| y[i] * g[i]).sum();
            // d(v/|v|)/dv applied to g: (g - y (y·g)) / |v|
            for (axis, &i) in idx.iter().enumerate() {
                let mut d = (g[i] - y[i] * dot) / n;
                if facing && axis == 2 {
                    // v_z = -|x_z|
                    d = if xv[i] > T::zero() {
                        -d
                    } else if xv[i] < T::zero() {
                        d
                    } else {
                        T::zero()
                    };
                }
                gx[i] += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_normals_are_unit_and_face_camera() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(vec![3, 4, 5], |i| ((i * 31) % 17) as f32 - 8.0));
        let y = tape.unit_normals(x, true).unwrap();
        let v = tape.value(y);
        for p in 0..20 {
            let (a, b, c) = (v.data()[p], v.data()[20 + p], v.data()[40 + p]);
            assert!(((a * a + b * b + c * c).sqrt() - 1.0).abs() < 1e-5);
            assert!(c <= 0.0);
        }
    }

    #[test]
    fn zero_vector_maps_to_camera_facing_default() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![3, 1, 1]));
        let y = tape.unit_normals(x, false).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, -1.0]);
    }

    #[test]
    fn mask_fill_tiles_over_leading_axes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![2, 3], 1.0));
        let y = tape.mask_fill(x, vec![true, false, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert!(tape.mask_fill(x, vec![true; 4]).is_err());
    }
}
