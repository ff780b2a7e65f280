use crate::error::{shape_err, Result};
use crate::tape::{Grads, Op};
use crate::{Scalar, Tape, Tensor, Var};

/// Corner indices and weights of one bilinear lookup.
struct Taps<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

impl<T: Scalar> Taps<T> {
    fn new(u: T, v: T) -> Self {
        let (xf, yf) = (u.floor(), v.floor());
        Self {
            x0: xf.as_f64() as isize,
            y0: yf.as_f64() as isize,
            fx: u - xf,
            fy: v - yf,
        }
    }
}

#[inline]
fn fetch<T: Scalar>(plane: &[T], h: usize, w: usize, x: isize, y: isize) -> T {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

fn grid_layout<T: Scalar>(tape: &Tape<T>, feature: Var, grid: Var) -> Result<(usize, usize, usize, usize, usize)> {
    let fs = tape.shape(feature);
    let gs = tape.shape(grid);
    if fs.len() != 3 || gs.len() != 3 || gs[2] != 2 {
        return Err(shape_err(
            "bilinear_sample",
            format!("feature {fs:?} must be [C,H,W], grid {gs:?} must be [H',W',2]"),
        ));
    }
    Ok((fs[0], fs[1], fs[2], gs[0], gs[1]))
}

impl<T: Scalar> Tape<T> {
    /// Samples `feature [C,H,W]` at continuous pixel positions
    /// `grid [H',W',2]`, where `grid[..,0]` is the column and `grid[..,1]`
    /// the row. Taps outside the image read as zero.
    pub fn bilinear_sample(&mut self, feature: Var, grid: Var) -> Result<Var> {
        let (c, h, w, gh, gw) = grid_layout(self, feature, grid)?;
        let fv = self.value(feature).data();
        let gv = self.value(grid).data();
        let npts = gh * gw;
        let mut out = vec![T::zero(); c * npts];
        let one = T::one();
        for p in 0..npts {
            let t = Taps::new(gv[2 * p], gv[2 * p + 1]);
            let (w00, w10) = ((one - t.fx) * (one - t.fy), t.fx * (one - t.fy));
            let (w01, w11) = ((one - t.fx) * t.fy, t.fx * t.fy);
            for ci in 0..c {
                let plane = &fv[ci * h * w..(ci + 1) * h * w];
                out[ci * npts + p] = fetch(plane, h, w, t.x0, t.y0) * w00
                    + fetch(plane, h, w, t.x0 + 1, t.y0) * w10
                    + fetch(plane, h, w, t.x0, t.y0 + 1) * w01
                    + fetch(plane, h, w, t.x0 + 1, t.y0 + 1) * w11;
            }
        }
        let value = Tensor::new(vec![c, gh, gw], out)?;
        self.push("bilinear_sample", value, Op::Bilinear { f: feature, grid }, &[feature, grid])
    }
}

pub(crate) fn bilinear_backward<T: Scalar>(f: Var, grid: Var, g: &[T], grads: &mut Grads<'_, T>) {
    let fshape = grads.value(f).shape();
    let (c, h, w) = (fshape[0], fshape[1], fshape[2]);
    let fv = grads.value(f).data();
    let gv = grads.value(grid).data();
    let npts = gv.len() / 2;
    let one = T::one();
    if grads.wants(f) {
        let gf = grads.slot(f);
        for p in 0..npts {
            let t = Taps::new(gv[2 * p], gv[2 * p + 1]);
            let taps = [
                (t.x0, t.y0, (one - t.fx) * (one - t.fy)),
                (t.x0 + 1, t.y0, t.fx * (one - t.fy)),
                (t.x0, t.y0 + 1, (one - t.fx) * t.fy),
                (t.x0 + 1, t.y0 + 1, t.fx * t.fy),
            ];
            for (x, y, wt) in taps {
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let idx = y as usize * w + x as usize;
                for ci in 0..c {
                    gf[ci * h * w + idx] += g[ci * npts + p] * wt;
                }
            }
        }
    }
    if grads.wants(grid) {
        let gg = grads.slot(grid);
        for p in 0..npts {
            let t = Taps::new(gv[2 * p], gv[2 * p + 1]);
            let (mut du, mut dv) = (T::zero(), T::zero());
            for ci in 0..c {
                let plane = &fv[ci * h * w..(ci + 1) * h * w];
                let f00 = fetch(plane, h, w, t.x0, t.y0);
                let f10 = fetch(plane, h, w, t.x0 + 1, t.y0);
                let f01 = fetch(plane, h, w, t.x0, t.y0 + 1);
                let f11 = fetch(plane, h, w, t.x0 + 1, t.y0 + 1);
                let go = g[ci * npts + p];
                du += go * ((f10 - f00) * (one - t.fy) + (f11 - f01) * t.fy);
                dv += go * ((f01 - f00) * (one - t.fx) + (f11 - f10) * t.fx);
            }
            gg[2 * p] += du;
            gg[2 * p + 1] += dv;
        }
    }
}
