//! Pinhole cameras, the plane-sweep warp, depth hypotheses and rigid
//! alignment.
//!
//! Extrinsics map camera to world: `X_w = R · X_c + t`, so `t` is the camera
//! centre. Camera space is x right, y down, z forward, and pixel centres sit
//! on integer coordinates.

use diffcore::Tensor;
use nalgebra::{Matrix3, Matrix4, Vector3, SVD};

use crate::error::{config, MvpsError, Result};
use crate::spatial::NearestIndex;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Smallest camera-space z accepted by [`Camera::project`].
pub const MIN_Z: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    pub depth_range: (f64, f64),
    /// `(height, width)` in pixels.
    pub size: (usize, usize),
}

impl Camera {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, depth_range: (f64, f64), size: (usize, usize)) -> Result<Self> {
        let cam = Self {
            k,
            r,
            t,
            depth_range,
            size,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.r.transpose() * self.r;
        if (rtr - Mat3::identity()).abs().max() > 1e-6 || (self.r.determinant() - 1.0).abs() > 1e-6 {
            return Err(config("camera rotation is not a proper rotation"));
        }
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(config("intrinsics must be upper triangular with K[2,2] = 1"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(config("focal lengths must be positive"));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(config(format!("invalid depth range ({lo}, {hi})")));
        }
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(config("empty image size"));
        }
        Ok(())
    }

    /// Pinhole intrinsics for a horizontal field of view, principal point at
    /// the image centre.
    pub fn intrinsics_from_fov(fov_deg: f64, size: (usize, usize)) -> Mat3 {
        let (h, w) = (size.0 as f64, size.1 as f64);
        let f = 0.5 * w / (0.5 * fov_deg.to_radians()).tan();
        Mat3::new(f, 0.0, 0.5 * (w - 1.0), 0.0, f, 0.5 * (h - 1.0), 0.0, 0.0, 1.0)
    }

    /// Camera at `eye` looking at `target`, with `up` pointing away from the
    /// image's downward axis.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, k: Mat3, depth_range: (f64, f64), size: (usize, usize)) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(config("look-at direction parallel to up vector"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Mat3::from_columns(&[x, y, z]);
        Self::new(k, r, eye, depth_range, size)
    }

    pub fn center(&self) -> Vec3 {
        self.t
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.r.column(2).into()
    }

    /// Camera for an image resampled by `factor` (pixel `j` of the new image
    /// sits at pixel `j / factor` of the old one).
    pub fn scaled(&self, factor: f64) -> Self {
        let mut k = self.k;
        for c in 0..3 {
            k[(0, c)] *= factor;
            k[(1, c)] *= factor;
        }
        let size = (
            (self.size.0 as f64 * factor).round() as usize,
            (self.size.1 as f64 * factor).round() as usize,
        );
        Self { k, size, ..self.clone() }
    }

    /// Camera for the window with top-left pixel `(x0, y0)` and size `(h, w)`.
    pub fn cropped(&self, x0: usize, y0: usize, size: (usize, usize)) -> Self {
        let mut k = self.k;
        k[(0, 2)] -= x0 as f64;
        k[(1, 2)] -= y0 as f64;
        Self { k, size, ..self.clone() }
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.r.transpose() * (p - self.t)
    }

    /// `R K⁻¹ d [u v 1]ᵀ + t`.
    pub fn lift(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if depth <= 0.0 || !depth.is_finite() {
            return Err(MvpsError::NonPositiveDepth(depth));
        }
        Ok(self.r * self.backproject(u, v, depth) + self.t)
    }

    /// Camera-space point at `depth` along pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let k = &self.k;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Vec3::new(x * depth, y * depth, depth)
    }

    /// `K Rᵀ (X − t)` followed by the perspective division; returns
    /// `(u, v, depth)`.
    pub fn project(&self, p: &Vec3) -> Result<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= MIN_Z {
            return Err(MvpsError::BehindCamera { z: c.z });
        }
        let h = self.k * c;
        Ok((h.x / h.z, h.y / h.z, c.z))
    }

    /// Unit world-space direction of the ray through pixel `(u, v)`, and the
    /// camera-space z gained per unit distance along it.
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, f64) {
        let d = self.backproject(u, v, 1.0);
        let n = d.norm();
        (self.r * (d / n), 1.0 / n)
    }

    /// The 4×4 world-to-camera matrix.
    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let rt = self.r.transpose();
        let tt = -(rt * self.t);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&tt);
        m
    }

    /// Inverse of [`Camera::world_to_camera`].
    pub fn from_world_to_camera(m: &Matrix4<f64>, k: Mat3, depth_range: (f64, f64), size: (usize, usize)) -> Result<Self> {
        let rt: Mat3 = m.fixed_view::<3, 3>(0, 0).into();
        let tt: Vec3 = m.fixed_view::<3, 1>(0, 3).into();
        let r = rt.transpose();
        Self::new(k, r, -(r * tt), depth_range, size)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.size.1 - 1) as f64 && v <= (self.size.0 - 1) as f64
    }
}

/// Position in `src` of the reference pixel `(u, v)` seen at `depth`.
pub fn warp_pixel(u: f64, v: f64, depth: f64, reference: &Camera, src: &Camera) -> Result<(f64, f64)> {
    let p = reference.lift(u, v, depth)?;
    let (us, vs, _) = src.project(&p)?;
    Ok((us, vs))
}

/// Candidate depths `h(u,v,w) = prev(u,v) + Δ (w/(N−1) − 1/2)`.
#[derive(Clone, Debug)]
pub struct DepthHypotheses {
    /// `[N, H, W]`.
    pub h: Tensor<f32>,
    pub delta: f64,
    pub count: usize,
}

pub fn hypothesis_offset(w: usize, delta: f64, count: usize) -> f64 {
    delta * (w as f64 / (count - 1) as f64 - 0.5)
}

pub fn depth_hypotheses(prev: &Tensor<f32>, delta: f64, count: usize) -> Result<DepthHypotheses> {
    if count < 2 {
        return Err(config(format!("need at least 2 depth hypotheses, got {count}")));
    }
    if prev.rank() != 2 {
        return Err(config(format!("previous depth must be [H,W], got {:?}", prev.shape())));
    }
    if !(delta > 0.0) {
        return Err(config(format!("hypothesis interval must be positive, got {delta}")));
    }
    let plane = prev.numel();
    let mut data = Vec::with_capacity(count * plane);
    for w in 0..count {
        let off = hypothesis_offset(w, delta, count);
        data.extend(prev.data().iter().map(|&p| (p as f64 + off) as f32));
    }
    let shape = [count, prev.shape()[0], prev.shape()[1]];
    Ok(DepthHypotheses {
        h: Tensor::new(shape.to_vec(), data)?,
        delta,
        count,
    })
}

/// Corner-aligned bilinear 2× upsampling of a `[H, W]` map.
pub fn upsample_depth(depth: &Tensor<f32>) -> Result<Tensor<f32>> {
    if depth.rank() != 2 {
        return Err(config(format!("depth must be [H,W], got {:?}", depth.shape())));
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let (oh, ow) = (2 * h, 2 * w);
    let coord = |i: usize, n: usize, on: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n - 1) as f64 / (on - 1) as f64;
        let x0 = (x.floor() as usize).min(n - 2);
        (x0, x0 + 1, x - x0 as f64)
    };
    let d = depth.data();
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (y0, y1, fy) = coord(i, h, oh);
        for j in 0..ow {
            let (x0, x1, fx) = coord(j, w, ow);
            let at = |y: usize, x: usize| d[y * w + x] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Ok(Tensor::new(vec![oh, ow], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(MvpsError::Degenerate(format!(
            "rigid fit needs ≥ 3 paired points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = u * fix * vt;
    Ok(RigidTransform {
        rotation,
        translation: cd - rotation * cs,
    })
}

/// Fails for coincident or collinear point sets.
pub fn check_spread(points: &[Vec3]) -> Result<()> {
    if points.len() < 3 {
        return Err(MvpsError::Degenerate(format!("{} points", points.len())));
    }
    let n = points.len() as f64;
    let c = points.iter().sum::<Vec3>() / n;
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - c;
        scatter += d * d.transpose();
    }
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 1e-24 || ev[1] <= 1e-10 * ev[0] {
        return Err(MvpsError::Degenerate("point set is coincident or collinear".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once the mean correspondence distance improves by less than this.
    pub tol: f64,
    /// Fraction of worst pairs dropped from each update (0 disables).
    pub trim_fraction: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-10,
            trim_fraction: 0.0,
        }
    }
}

/// Point-to-point ICP; returns the transform mapping `source` onto `target`.
pub fn icp_align(source: &[Vec3], target: &[Vec3], cfg: &IcpConfig) -> Result<RigidTransform> {
    check_spread(source)?;
    if target.is_empty() {
        return Err(MvpsError::Empty("ICP target"));
    }
    if !(0.0..1.0).contains(&cfg.trim_fraction) {
        return Err(config(format!("trim fraction {} outside [0, 1)", cfg.trim_fraction)));
    }
    let index = NearestIndex::new(target);
    let mut current = RigidTransform::identity();
    let mut prev_err = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let moved: Vec<Vec3> = source.iter().map(|p| current.apply(p)).collect();
        let mut pairs: Vec<(f64, usize, usize)> = moved
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (j, d) = index.nearest(p);
                (d, i, j)
            })
            .collect();
        let err = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
        if prev_err - err < cfg.tol {
            break;
        }
        prev_err = err;
        if cfg.trim_fraction > 0.0 {
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let keep = ((1.0 - cfg.trim_fraction) * pairs.len() as f64).ceil().max(3.0) as usize;
            pairs.truncate(keep);
        }
        let src: Vec<Vec3> = pairs.iter().map(|&(_, i, _)| moved[i]).collect();
        let dst: Vec<Vec3> = pairs.iter().map(|&(_, _, j)| target[j]).collect();
        let step = kabsch(&src, &dst)?;
        current = step.compose(&current);
    }
    Ok(current)
}
