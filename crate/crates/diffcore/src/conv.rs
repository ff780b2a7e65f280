//! Convolution and transposed convolution over 2 or 3 spatial axes.
//!
//! Both are lowered to im2col + GEMM. 2D is handled as 3D with a unit depth
//! axis. Convolution is cross-correlation: the kernel is not flipped.

use crate::error::{config_err, shape_err, Result};
use crate::tape::{Grads, Op};
use crate::{Scalar, Tape, Tensor, Var};

/// Geometry of a convolution `[n, c, in_sp] -> [n, o, out_sp]`.
///
/// For transposed convolution this describes the adjoint forward
/// convolution, i.e. from the transposed op's output back to its input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub n: usize,
    pub c: usize,
    pub o: usize,
    pub in_sp: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_sp: [usize; 3],
}

impl ConvParams {
    fn kernel_len(&self) -> usize {
        self.k.iter().product()
    }

    fn in_len(&self) -> usize {
        self.in_sp.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_sp.iter().product()
    }

    fn rows(&self) -> usize {
        self.c * self.kernel_len()
    }
}

fn out_extent(op: &'static str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < k {
        return Err(config_err(
            op,
            format!("kernel {k} larger than padded input {}", input + 2 * pad),
        ));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

/// Unfolds one image `[c, in_sp]` into `[c·K, out_len]` patch columns.
fn im2col<T: Scalar>(p: &ConvParams, x: &[T], cols: &mut [T]) {
    let [id, ih, iw] = p.in_sp;
    let [kd, kh, kw] = p.k;
    let [sd, sh, sw] = p.stride;
    let [pd, ph, pw] = p.pad;
    let [od, oh, ow] = p.out_sp;
    let plen = p.out_len();
    let mut row = 0;
    for ci in 0..p.c {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for cc in 0..kw {
                    let dst = &mut cols[row * plen..(row + 1) * plen];
                    let mut o = 0;
                    for zo in 0..od {
                        let z = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let y = (yo * sh + b) as isize - ph as isize;
                            let line = &mut dst[o..o + ow];
                            o += ow;
                            if z < 0 || z >= id as isize || y < 0 || y >= ih as isize {
                                line.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(z as usize * ih + y as usize) * iw..][..iw];
                            for (xo, v) in line.iter_mut().enumerate() {
                                let xi = (xo * sw + cc) as isize - pw as isize;
                                *v = if xi >= 0 && xi < iw as isize {
                                    src[xi as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Scalar>(p: &ConvParams, cols: &[T], x: &mut [T]) {
    let [id, ih, iw] = p.in_sp;
    let [kd, kh, kw] = p.k;
    let [sd, sh, sw] = p.stride;
    let [pd, ph, pw] = p.pad;
    let [od, oh, ow] = p.out_sp;
    let plen = p.out_len();
    let mut row = 0;
    for ci in 0..p.c {
        let xc = &mut x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for cc in 0..kw {
                    let src = &cols[row * plen..(row + 1) * plen];
                    let mut o = 0;
                    for zo in 0..od {
                        let z = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let y = (yo * sh + b) as isize - ph as isize;
                            let line = &src[o..o + ow];
                            o += ow;
                            if z < 0 || z >= id as isize || y < 0 || y >= ih as isize {
                                continue;
                            }
                            let dst = &mut xc[(z as usize * ih + y as usize) * iw..][..iw];
                            for (xo, &v) in line.iter().enumerate() {
                                let xi = (xo * sw + cc) as isize - pw as isize;
                                if xi >= 0 && xi < iw as isize {
                                    dst[xi as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Splits `[n, c, spatial...]` with 2 or 3 spatial axes into `(n, c, [d, h, w])`.
fn spatial_dims(op: &'static str, shape: &[usize], dims: usize) -> Result<(usize, usize, [usize; 3])> {
    if shape.len() != dims + 2 {
        return Err(shape_err(op, format!("expected rank {}, got {shape:?}", dims + 2)));
    }
    let sp = if dims == 2 {
        [1, shape[2], shape[3]]
    } else {
        [shape[2], shape[3], shape[4]]
    };
    Ok((shape[0], shape[1], sp))
}

fn kernel_dims(op: &'static str, shape: &[usize], dims: usize) -> Result<[usize; 3]> {
    if shape.len() != dims + 2 {
        return Err(shape_err(op, format!("weight rank {} expected, got {shape:?}", dims + 2)));
    }
    let k = if dims == 2 {
        [1, shape[2], shape[3]]
    } else {
        [shape[2], shape[3], shape[4]]
    };
    if k.iter().any(|&v| v % 2 == 0) {
        return Err(config_err(op, format!("kernel extents must be odd, got {shape:?}")));
    }
    Ok(k)
}

fn lift3(dims: usize, v: usize) -> [usize; 3] {
    if dims == 2 {
        [1, v, v]
    } else {
        [v, v, v]
    }
}

fn lift3_pad(dims: usize, v: usize) -> [usize; 3] {
    if dims == 2 {
        [0, v, v]
    } else {
        [v, v, v]
    }
}

fn output_shape(p: &ConvParams, channels: usize, dims: usize) -> Vec<usize> {
    let mut shape = vec![p.n, channels];
    if dims == 2 {
        shape.extend_from_slice(&p.out_sp[1..]);
    } else {
        shape.extend_from_slice(&p.out_sp);
    }
    shape
}

impl<T: Scalar> Tape<T> {
    /// 2D cross-correlation: `x [N,C,H,W]`, `w [O,C,k,k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv_nd("conv2d", 2, x, w, b, stride, padding)
    }

    /// 3D cross-correlation: `x [N,C,D,H,W]`, `w [O,C,k,k,k]`, `b [O]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv_nd("conv3d", 3, x, w, b, stride, padding)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_nd(
        &mut self,
        op: &'static str,
        dims: usize,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(config_err(op, "stride must be positive"));
        }
        let (n, c, in_sp) = spatial_dims(op, self.shape(x), dims)?;
        let wshape = self.shape(w).to_vec();
        let k = kernel_dims(op, &wshape, dims)?;
        let o = wshape[0];
        if wshape[1] != c {
            return Err(shape_err(op, format!("input has {c} channels, weight {wshape:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(op, format!("bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let stride = lift3(dims, stride);
        let pad = lift3_pad(dims, padding);
        let mut out_sp = [0; 3];
        for a in 0..3 {
            out_sp[a] = out_extent(op, in_sp[a], k[a], stride[a], pad[a])?;
        }
        let p = ConvParams {
            n,
            c,
            o,
            in_sp,
            k,
            stride,
            pad,
            out_sp,
        };
        let (rows, plen, ilen) = (p.rows(), p.out_len(), p.in_len());
        let mut out = vec![T::zero(); n * o * plen];
        let mut cols = vec![T::zero(); rows * plen];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                im2col(&p, &xv[bi * c * ilen..(bi + 1) * c * ilen], &mut cols);
                let y = &mut out[bi * o * plen..(bi + 1) * o * plen];
                T::gemm(o, rows, plen, wv, false, &cols, false, T::zero(), y);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oi, row) in y.chunks_mut(plen).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[oi]);
                    }
                }
            }
        }
        let value = Tensor::new(output_shape(&p, o, dims), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(op, value, Op::Conv { x, w, b, p }, &inputs)
    }

    /// 2D transposed convolution: `x [N,Cin,H,W]`, `w [Cin,Cout,k,k]`.
    ///
    /// Output padding is `stride - 1`, so with `k = 3, padding = 1` the
    /// output is exactly `stride·H × stride·W`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv_transpose_nd("conv_transpose2d", 2, x, w, stride, padding)
    }

    /// 3D transposed convolution: `x [N,Cin,D,H,W]`, `w [Cin,Cout,k,k,k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv_transpose_nd("conv_transpose3d", 3, x, w, stride, padding)
    }

    fn conv_transpose_nd(
        &mut self,
        op: &'static str,
        dims: usize,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if !(1..=2).contains(&stride) {
            return Err(config_err(op, format!("stride must be 1 or 2, got {stride}")));
        }
        let (n, cin, small_sp) = spatial_dims(op, self.shape(x), dims)?;
        let wshape = self.shape(w).to_vec();
        let k = kernel_dims(op, &wshape, dims)?;
        if wshape[0] != cin {
            return Err(shape_err(op, format!("input has {cin} channels, weight {wshape:?}")));
        }
        let cout = wshape[1];
        let stride3 = lift3(dims, stride);
        let pad = lift3_pad(dims, padding);
        let mut big_sp = [0; 3];
        for a in 0..3 {
            let full = (small_sp[a] - 1) * stride3[a] + k[a] + (stride3[a] - 1);
            if full < 2 * pad[a] + 1 {
                return Err(config_err(op, "padding too large for input"));
            }
            big_sp[a] = full - 2 * pad[a];
        }
        // Adjoint convolution maps the big (output) grid back to the small one.
        let p = ConvParams {
            n,
            c: cout,
            o: cin,
            in_sp: big_sp,
            k,
            stride: stride3,
            pad,
            out_sp: small_sp,
        };
        for a in 0..3 {
            debug_assert_eq!(out_extent(op, big_sp[a], k[a], stride3[a], pad[a])?, small_sp[a]);
        }
        let (rows, plen, blen) = (p.rows(), p.out_len(), p.in_len());
        let mut out = vec![T::zero(); n * cout * blen];
        let mut cols = vec![T::zero(); rows * plen];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                let xn = &xv[bi * cin * plen..(bi + 1) * cin * plen];
                T::gemm(rows, cin, plen, wv, true, xn, false, T::zero(), &mut cols);
                col2im(&p, &cols, &mut out[bi * cout * blen..(bi + 1) * cout * blen]);
            }
        }
        let mut shape = vec![n, cout];
        if dims == 2 {
            shape.extend_from_slice(&big_sp[1..]);
        } else {
            shape.extend_from_slice(&big_sp);
        }
        let value = Tensor::new(shape, out)?;
        self.push(op, value, Op::ConvTranspose { x, w, p }, &[x, w])
    }
}

pub(crate) fn conv_backward<T: Scalar>(
    x: Var,
    w: Var,
    b: Option<Var>,
    p: &ConvParams,
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    let (rows, plen, ilen) = (p.rows(), p.out_len(), p.in_len());
    let (n, c, o) = (p.n, p.c, p.o);
    if let Some(b) = b {
        if grads.wants(b) {
            let gb = grads.slot(b);
            for bi in 0..n {
                for (oi, row) in g[bi * o * plen..(bi + 1) * o * plen].chunks(plen).enumerate() {
                    gb[oi] += row.iter().copied().sum::<T>();
                }
            }
        }
    }
    let want_w = grads.wants(w);
    let want_x = grads.wants(x);
    if !want_w && !want_x {
        return;
    }
    let xv = grads.value(x).data();
    let wv = grads.value(w).data();
    let mut cols = vec![T::zero(); rows * plen];
    if want_w {
        let mut gw = vec![T::zero(); o * rows];
        for bi in 0..n {
            im2col(p, &xv[bi * c * ilen..(bi + 1) * c * ilen], &mut cols);
            let gy = &g[bi * o * plen..(bi + 1) * o * plen];
            T::gemm(o, plen, rows, gy, false, &cols, true, T::one(), &mut gw);
        }
        grads.slot(w).iter_mut().zip(&gw).for_each(|(a, &v)| *a += v);
    }
    if want_x {
        let gx = grads.slot(x);
        for bi in 0..n {
            let gy = &g[bi * o * plen..(bi + 1) * o * plen];
            T::gemm(rows, o, plen, wv, true, gy, false, T::zero(), &mut cols);
            col2im(p, &cols, &mut gx[bi * c * ilen..(bi + 1) * c * ilen]);
        }
    }
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: Var,
    w: Var,
    p: &ConvParams,
    g: &[T],
    grads: &mut Grads<'_, T>,
) {
    let want_w = grads.wants(w);
    let want_x = grads.wants(x);
    if !want_w && !want_x {
        return;
    }
    let (rows, plen, blen) = (p.rows(), p.out_len(), p.in_len());
    let (n, cout, cin) = (p.n, p.c, p.o);
    let xv = grads.value(x).data();
    let wv = grads.value(w).data();
    let mut cols = vec![T::zero(); rows * plen];
    let mut gw = vec![T::zero(); if want_w { cin * rows } else { 0 }];
    let mut gx = vec![T::zero(); if want_x { n * cin * plen } else { 0 }];
    for bi in 0..n {
        im2col(p, &g[bi * cout * blen..(bi + 1) * cout * blen], &mut cols);
        if want_x {
            let dst = &mut gx[bi * cin * plen..(bi + 1) * cin * plen];
            T::gemm(cin, rows, plen, wv, false, &cols, false, T::zero(), dst);
        }
        if want_w {
            let xn = &xv[bi * cin * plen..(bi + 1) * cin * plen];
            T::gemm(cin, plen, rows, xn, false, &cols, true, T::one(), &mut gw);
        }
    }
    if want_w {
        grads.slot(w).iter_mut().zip(&gw).for_each(|(a, &v)| *a += v);
    }
    if want_x {
        grads.slot(x).iter_mut().zip(&gx).for_each(|(a, &v)| *a += v);
    }
}
