//! Synthetic multi-view, multi-light scenes: analytic primitives, procedural
//! albedo, Cook–Torrance direct lighting with cast shadows, and ground-truth
//! depth, normal and mask maps.

use std::f64::consts::PI;

use diffcore::Tensor;
use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::geometry::{Camera, Mat3, Vec3};

/// Offset along the normal for shadow-ray origins.
const SHADOW_BIAS: f64 = 1e-6;
/// Fresnel reflectance at normal incidence.
pub const F0: f64 = 0.04;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: Vec3 },
    /// Capped cylinder along the local z axis.
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half } => half.norm(),
            Shape::Cylinder { radius, half_height } => radius.hypot(*half_height),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Constant(Vec3),
    Checker { a: Vec3, b: Vec3, scale: f64 },
    Noise { a: Vec3, b: Vec3, frequency: f64, seed: u64 },
    Gradient { a: Vec3, b: Vec3, axis: Vec3 },
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
pub fn value_noise(p: &Vec3, seed: u64) -> f64 {
    let base = [p.x.floor(), p.y.floor(), p.z.floor()];
    let f = [p.x - base[0], p.y - base[1], p.z - base[2]];
    let s: Vec<f64> = f.iter().map(|t| t * t * (3.0 - 2.0 * t)).collect();
    let (ix, iy, iz) = (base[0] as i64, base[1] as i64, base[2] as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s[0] } else { 1.0 - s[0] })
                    * (if dy == 1 { s[1] } else { 1.0 - s[1] })
                    * (if dz == 1 { s[2] } else { 1.0 - s[2] });
                acc += w * hash3(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

impl Texture {
    /// Albedo at a point in the primitive's local frame.
    pub fn eval(&self, p: &Vec3) -> Vec3 {
        let mix = |a: &Vec3, b: &Vec3, t: f64| a * (1.0 - t) + b * t;
        match self {
            Texture::Constant(c) => *c,
            Texture::Checker { a, b, scale } => {
                let k = (p.x / scale).floor() + (p.y / scale).floor() + (p.z / scale).floor();
                if (k as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Noise { a, b, frequency, seed } => {
                let q = p * *frequency;
                let n = 0.65 * value_noise(&q, *seed) + 0.35 * value_noise(&(q * 2.03), seed.wrapping_add(1));
                mix(a, b, n)
            }
            Texture::Gradient { a, b, axis } => mix(a, b, (0.5 + 0.5 * p.dot(axis)).clamp(0.0, 1.0)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Texture::Constant(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    pub albedo: Texture,
    /// GGX roughness in `(0, 1]`.
    pub roughness: f64,
    /// Scale of the specular lobe; 0 gives a Lambertian surface.
    pub specular_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Local-to-world rotation.
    pub rotation: Mat3,
    pub center: Vec3,
    pub material: Material,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    /// Outward unit normal, world frame.
    pub normal: Vec3,
    pub primitive: usize,
    pub local: Vec3,
}

fn solve_quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Numerically stable root pair.
    let q = -0.5 * (b + b.signum() * sq);
    let (r0, r1) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    Some((r0.min(r1), r0.max(r1)))
}

impl Primitive {
    /// Nearest intersection with `t > t_min` in the local frame; returns the
    /// distance and local outward normal.
    fn intersect_local(&self, o: &Vec3, d: &Vec3, t_min: f64) -> Option<(f64, Vec3)> {
        let pick = |t0: f64, t1: f64| {
            if t0 > t_min {
                Some(t0)
            } else if t1 > t_min {
                Some(t1)
            } else {
                None
            }
        };
        match &self.shape {
            Shape::Sphere { radius } => {
                let (t0, t1) = solve_quadratic(d.dot(d), 2.0 * o.dot(d), o.dot(o) - radius * radius)?;
                let t = pick(t0, t1)?;
                Some((t, (o + d * t) / *radius))
            }
            Shape::Box { half } => {
                let (mut tn, mut tf) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut an, mut af) = (0usize, 0usize);
                for a in 0..3 {
                    if d[a].abs() < 1e-300 {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > tn {
                        tn = t0;
                        an = a;
                    }
                    if t1 < tf {
                        tf = t1;
                        af = a;
                    }
                }
                if tn > tf {
                    return None;
                }
                let (t, axis) = if tn > t_min {
                    (tn, an)
                } else if tf > t_min {
                    (tf, af)
                } else {
                    return None;
                };
                let mut n = Vec3::zeros();
                n[axis] = (o[axis] + d[axis] * t).signum();
                Some((t, n))
            }
            Shape::Cylinder { radius, half_height } => {
                let mut best: Option<(f64, Vec3)> = None;
                let mut offer = |t: f64, n: Vec3| {
                    if t > t_min && best.is_none_or(|(b, _)| t < b) {
                        best = Some((t, n));
                    }
                };
                let a = d.x * d.x + d.y * d.y;
                if a > 0.0 {
                    let b = 2.0 * (o.x * d.x + o.y * d.y);
                    let c = o.x * o.x + o.y * o.y - radius * radius;
                    if let Some((t0, t1)) = solve_quadratic(a, b, c) {
                        for t in [t0, t1] {
                            let p = o + d * t;
                            if p.z.abs() <= *half_height {
                                offer(t, Vec3::new(p.x, p.y, 0.0) / *radius);
                            }
                        }
                    }
                }
                if d.z != 0.0 {
                    for s in [-1.0, 1.0] {
                        let t = (s * half_height - o.z) / d.z;
                        let p = o + d * t;
                        if p.x * p.x + p.y * p.y <= radius * radius {
                            offer(t, Vec3::new(0.0, 0.0, s));
                        }
                    }
                }
                best
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            let rt = p.rotation.transpose();
            let o = rt * (origin - p.center);
            let d = rt * dir;
            if let Some((t, n)) = p.intersect_local(&o, &d, t_min) {
                // Strict comparison with index order keeps overlapping
                // coincident surfaces deterministic.
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        normal: (p.rotation * n).normalize(),
                        primitive: i,
                        local: o + d * t,
                    });
                }
            }
        }
        best
    }

    pub fn occluded(&self, origin: &Vec3, dir: &Vec3) -> bool {
        self.intersect(origin, dir, SHADOW_BIAS).is_some()
    }

    pub fn bounding_radius(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.center.norm() + p.shape.bounding_radius())
            .fold(0.0, f64::max)
    }
}

/// GGX / Smith height-correlated / Schlick specular term, without the
/// cosine factor.
pub fn cook_torrance_specular(n: &Vec3, v: &Vec3, l: &Vec3, roughness: f64) -> f64 {
    let nl = n.dot(l);
    let nv = n.dot(v).max(1e-6);
    if nl <= 0.0 {
        return 0.0;
    }
    let h = (v + l).normalize();
    let nh = n.dot(&h).max(0.0);
    let vh = v.dot(&h).max(0.0);
    let a2 = (roughness * roughness).powi(2);
    let denom = nh * nh * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * denom * denom);
    let vis = 0.5 / (nl * (nv * nv * (1.0 - a2) + a2).sqrt() + nv * (nl * nl * (1.0 - a2) + a2).sqrt());
    let f = F0 + (1.0 - F0) * (1.0 - vh).powi(5);
    d * vis * f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub num_views: usize,
    pub num_lights_per_view: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub fov_deg: f64,
    pub azimuth_step_deg: f64,
    pub azimuth_jitter_deg: f64,
    /// Angle from world +z.
    pub polar_range_deg: (f64, f64),
    pub radius_range: (f64, f64),
    pub light_cap_deg: f64,
    pub light_intensity: f64,
    /// Stratified anti-aliasing grid per pixel axis.
    pub aa_per_axis: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub rng_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            num_views: 12,
            num_lights_per_view: 4,
            image_size: (64, 64),
            fov_deg: 9.3,
            azimuth_step_deg: 18.0,
            azimuth_jitter_deg: 3.0,
            polar_range_deg: (62.0, 64.0),
            radius_range: (14.0, 16.5),
            light_cap_deg: 45.0,
            light_intensity: 3.0,
            aa_per_axis: 2,
            train_scenes: 8,
            test_scenes: 2,
            rng_seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a <= b;
        if self.num_views < 2 {
            return Err(config("render.num_views must be at least 2"));
        }
        if self.num_lights_per_view < 1 {
            return Err(config("render.num_lights_per_view must be at least 1"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(config("render.image_size must be positive"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(config("render.fov_deg must lie in (0, 180)"));
        }
        if !ordered(self.polar_range_deg) || !ordered(self.radius_range) || self.radius_range.0 <= 1.0 {
            return Err(config("render ranges must be ordered and radii must exceed the scene radius"));
        }
        if !(self.light_cap_deg > 0.0 && self.light_cap_deg < 90.0) {
            return Err(config("render.light_cap_deg must lie in (0, 90)"));
        }
        if self.aa_per_axis == 0 || self.light_intensity <= 0.0 {
            return Err(config("render.aa_per_axis and render.light_intensity must be positive"));
        }
        Ok(())
    }
}

/// Deterministic sub-stream for one `(purpose, a, b)` counter.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose << 48 ^ a << 24 ^ b);
    rng
}

/// Cameras on a jittered azimuth ring looking at the origin, world z up.
/// Depth ranges bracket the unit sphere.
pub fn sample_cameras(cfg: &RenderConfig, rng: &mut impl Rng) -> Result<Vec<Camera>> {
    cfg.validate()?;
    let k = Camera::intrinsics_from_fov(cfg.fov_deg, cfg.image_size);
    (0..cfg.num_views)
        .map(|i| {
            let jitter = if cfg.azimuth_jitter_deg > 0.0 {
                rng.random_range(-cfg.azimuth_jitter_deg..=cfg.azimuth_jitter_deg)
            } else {
                0.0
            };
            let az = (i as f64 * cfg.azimuth_step_deg + jitter).to_radians();
            let polar = rng.random_range(cfg.polar_range_deg.0..=cfg.polar_range_deg.1).to_radians();
            let r = rng.random_range(cfg.radius_range.0..=cfg.radius_range.1);
            let eye = Vec3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos()) * r;
            Camera::look_at(eye, Vec3::zeros(), Vec3::z(), k, (r - 1.0, r + 1.0), cfg.image_size)
        })
        .collect()
}

/// Camera-frame unit vectors towards the lights. The first points straight
/// back at the camera; the rest are area-uniform on the cap around it.
pub fn sample_lights(cfg: &RenderConfig, rng: &mut impl Rng) -> Vec<Vec3> {
    let cos_max = cfg.light_cap_deg.to_radians().cos();
    let mut dirs = vec![Vec3::new(0.0, 0.0, -1.0)];
    for _ in 1..cfg.num_lights_per_view {
        let c: f64 = rng.random_range(cos_max..=1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let s = (1.0 - c * c).max(0.0).sqrt();
        dirs.push(Vec3::new(s * phi.cos(), s * phi.sin(), -c));
    }
    dirs
}

fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    // Uniform unit quaternion from four normals via Box–Muller.
    let mut g = || {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    };
    let q = nalgebra::Quaternion::new(g(), g(), g(), g());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

fn random_color(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9))
}

/// Two to four primitives inside the unit sphere; the first one always has
/// a constant albedo.
pub fn random_scene(rng: &mut impl Rng) -> Scene {
    let count = rng.random_range(2..=4);
    let mut primitives = Vec::with_capacity(count);
    for i in 0..count {
        let bound: f64 = rng.random_range(0.3..0.6);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Sphere { radius: bound },
            1 => {
                let raw = Vec3::new(rng.random_range(0.4..1.0), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0));
                Shape::Box { half: raw * (bound / raw.norm()) }
            }
            _ => {
                let ang: f64 = rng.random_range(0.4..1.2);
                Shape::Cylinder {
                    radius: bound * ang.sin(),
                    half_height: bound * ang.cos(),
                }
            }
        };
        let reach = 0.97 - bound;
        let center = loop {
            let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if c.norm() <= 1.0 {
                break c * reach;
            }
        };
        let albedo = if i == 0 {
            Texture::Constant(random_color(rng))
        } else {
            match rng.random_range(0..3) {
                0 => Texture::Checker {
                    a: random_color(rng),
                    b: random_color(rng),
                    scale: rng.random_range(0.12..0.3),
                },
                1 => Texture::Noise {
                    a: random_color(rng),
                    b: random_color(rng),
                    frequency: rng.random_range(4.0..10.0),
                    seed: rng.random(),
                },
                _ => {
                    let axis = Unit::new_normalize(Vec3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1));
                    Texture::Gradient {
                        a: random_color(rng),
                        b: random_color(rng),
                        axis: axis.into_inner() / bound,
                    }
                }
            }
        };
        primitives.push(Primitive {
            shape,
            rotation: random_rotation(rng),
            center,
            material: Material {
                albedo,
                roughness: rng.random_range(0.25..0.9),
                specular_weight: rng.random_range(0.2..1.0),
            },
        });
    }
    Scene { primitives }
}

/// One viewpoint under several lights with its ground truth.
#[derive(Clone, Debug)]
pub struct MultiLightView {
    /// Each `[3, H, W]`.
    pub images: Vec<Tensor<f32>>,
    /// Unit vectors towards the lights, camera frame.
    pub light_dirs: Vec<Vec3>,
    pub camera: Camera,
    /// `[H, W]`, camera-space z; 0 off the mask.
    pub gt_depth: Tensor<f32>,
    /// `[3, H, W]`, camera frame; 0 off the mask.
    pub gt_normal: Tensor<f32>,
    pub mask: Vec<bool>,
}

impl MultiLightView {
    pub fn size(&self) -> (usize, usize) {
        self.camera.size
    }
}

/// Ground truth from one central ray per pixel.
pub struct GroundTruth {
    pub depth: Vec<f64>,
    /// Camera frame.
    pub normal: Vec<Vec3>,
    pub mask: Vec<bool>,
}

pub fn ground_truth(scene: &Scene, cam: &Camera) -> GroundTruth {
    let (h, w) = cam.size;
    let rt = cam.r.transpose();
    let mut gt = GroundTruth {
        depth: vec![0.0; h * w],
        normal: vec![Vec3::zeros(); h * w],
        mask: vec![false; h * w],
    };
    for y in 0..h {
        for x in 0..w {
            let (dir, zscale) = cam.ray(x as f64, y as f64);
            if let Some(hit) = scene.intersect(&cam.center(), &dir, 0.0) {
                let i = y * w + x;
                gt.depth[i] = hit.t * zscale;
                gt.normal[i] = rt * hit.normal;
                gt.mask[i] = true;
            }
        }
    }
    gt
}

/// Linear RGB radiance of one ray under one directional light (world
/// frame), before clamping.
fn shade(scene: &Scene, origin: &Vec3, dir: &Vec3, light: &Vec3, intensity: f64) -> Vec3 {
    let Some(hit) = scene.intersect(origin, dir, 0.0) else {
        return Vec3::zeros();
    };
    let n = hit.normal;
    let nl = n.dot(light);
    if nl <= 0.0 {
        return Vec3::zeros();
    }
    let p = origin + dir * hit.t;
    if scene.occluded(&(p + n * SHADOW_BIAS), light) {
        return Vec3::zeros();
    }
    let m = &scene.primitives[hit.primitive].material;
    let albedo = m.albedo.eval(&hit.local);
    let spec = m.specular_weight * cook_torrance_specular(&n, &(-dir), light, m.roughness);
    (albedo / PI).add_scalar(spec) * (intensity * nl)
}

/// Pixel radiance averaged over the stratified sub-pixel grid, per light,
/// without clamping. Returns one `[3, H, W]` buffer per light.
pub fn render_radiance(scene: &Scene, cam: &Camera, lights_cam: &[Vec3], intensity: f64, aa_per_axis: usize) -> Vec<Vec<f32>> {
    let (h, w) = cam.size;
    let lights: Vec<Vec3> = lights_cam.iter().map(|l| cam.r * l.normalize()).collect();
    let n = aa_per_axis.max(1);
    let offsets: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 - 0.5).collect();
    let inv = 1.0 / (n * n) as f64;
    let rows: Vec<Vec<Vec3>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![Vec3::zeros(); lights.len() * w];
            for x in 0..w {
                for &oy in &offsets {
                    for &ox in &offsets {
                        let (dir, _) = cam.ray(x as f64 + ox, y as f64 + oy);
                        for (li, l) in lights.iter().enumerate() {
                            row[li * w + x] += shade(scene, &cam.center(), &dir, l, intensity) * inv;
                        }
                    }
                }
            }
            row
        })
        .collect();
    let plane = h * w;
    (0..lights.len())
        .map(|li| {
            let mut img = vec![0f32; 3 * plane];
            for (y, row) in rows.iter().enumerate() {
                for x in 0..w {
                    let c = row[li * w + x];
                    for ch in 0..3 {
                        img[ch * plane + y * w + x] = c[ch] as f32;
                    }
                }
            }
            img
        })
        .collect()
}

pub fn render_view(scene: &Scene, cam: &Camera, lights_cam: &[Vec3], cfg: &RenderConfig) -> Result<MultiLightView> {
    let (h, w) = cam.size;
    let plane = h * w;
    let images = render_radiance(scene, cam, lights_cam, cfg.light_intensity, cfg.aa_per_axis)
        .into_iter()
        .map(|img| Tensor::new(vec![3, h, w], img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let gt = ground_truth(scene, cam);
    let mut normal = vec![0f32; 3 * plane];
    for (i, n) in gt.normal.iter().enumerate() {
        for ch in 0..3 {
            normal[ch * plane + i] = n[ch] as f32;
        }
    }
    Ok(MultiLightView {
        images,
        light_dirs: lights_cam.iter().map(|l| l.normalize()).collect(),
        camera: cam.clone(),
        gt_depth: Tensor::new(vec![h, w], gt.depth.iter().map(|&d| d as f32).collect())?,
        gt_normal: Tensor::new(vec![3, h, w], normal)?,
        mask: gt.mask,
    })
}

/// Stream purposes for [`stream`].
pub mod streams {
    pub const SCENE: u64 = 1;
    pub const CAMERAS: u64 = 2;
    pub const LIGHTS: u64 = 3;
}

/// Renders every view of scene `index` under `cfg`.
pub fn render_scene(cfg: &RenderConfig, index: usize) -> Result<(Scene, Vec<MultiLightView>)> {
    cfg.validate()?;
    let scene = random_scene(&mut stream(cfg.rng_seed, streams::SCENE, index as u64, 0));
    let cams = sample_cameras(cfg, &mut stream(cfg.rng_seed, streams::CAMERAS, index as u64, 0))?;
    let views = cams
        .iter()
        .enumerate()
        .map(|(v, cam)| {
            let lights = sample_lights(cfg, &mut stream(cfg.rng_seed, streams::LIGHTS, index as u64, v as u64));
            render_view(&scene, cam, &lights, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scene, views))
}
