//! Criteria on the sweep, the light aggregation and the renderer: 4, 5, 6.

use std::f64::consts::PI;

use anyhow::Result;
use diffcore::{Tape, Tensor};
use mvps::fusion_eval::{round_trip, DepthView, FilterConfig};
use mvps::geometry::{Camera, Mat3, Vec3};
use mvps::network::{lafm_aggregate, split_batch, Ctx, Model, ModelConfig};
use mvps::plane_sweep::{
    cascade, cascade_infer, downsample_centered_box, empty_store, view_features, SweepConfig, VarianceRegularizer,
};
use mvps::render::{
    ground_truth, render_radiance, render_scene, render_view, sample_lights, stream, Material, MultiLightView, Primitive,
    RenderConfig, Scene, Shape, Texture,
};

use crate::{Outcome, Shared};

/// Distance of the textured plane from the reference camera.
const PLANE_DEPTH: f64 = 10.37;
const SHARPNESS: f32 = 1.0e5;

fn sweep_camera(x: f64, size: usize) -> Camera {
    let k = Camera::intrinsics_from_fov(20.0, (size, size));
    let target = Vec3::new(0.0, 0.0, PLANE_DEPTH);
    Camera::look_at(Vec3::new(x, 0.0, 0.0), target, Vec3::new(0.0, -1.0, 0.0), k, (9.0, 11.0), (size, size)).unwrap()
}

pub fn oracle_sweep(_: &mut Shared) -> Result<Outcome> {
    let size = 128;
    let plane = Primitive {
        shape: Shape::Box { half: Vec3::new(4.0, 4.0, 0.05) },
        rotation: Mat3::identity(),
        center: Vec3::new(0.0, 0.0, PLANE_DEPTH + 0.05),
        material: Material {
            albedo: Texture::Noise {
                a: Vec3::new(0.15, 0.2, 0.25),
                b: Vec3::new(0.9, 0.8, 0.7),
                frequency: 2.5,
                seed: 11,
            },
            roughness: 1.0,
            specular_weight: 0.0,
        },
    };
    let scene = Scene { primitives: vec![plane] };
    let cams = [sweep_camera(0.0, size), sweep_camera(-2.5, size), sweep_camera(2.5, size)];
    let cfg = RenderConfig {
        image_size: (size, size),
        ..RenderConfig::default()
    };
    // One world-fixed light, so the Lambertian plane looks the same from
    // every camera.
    let light = cams[0].r * Vec3::new(0.0, 0.0, -1.0);
    let views: Vec<MultiLightView> = cams
        .iter()
        .map(|c| render_view(&scene, c, &[c.r.transpose() * light], &cfg))
        .collect::<mvps::Result<_>>()?;

    let store = empty_store();
    let mut ctx = Ctx::new(&store, false);
    let feats: Vec<[diffcore::Var; 3]> = views
        .iter()
        .map(|v| -> Result<[diffcore::Var; 3]> {
            let mut out = Vec::with_capacity(3);
            for stride in [4, 2, 1] {
                out.push(ctx.tape.constant(downsample_centered_box(&v.images[0], stride)?));
            }
            Ok([out[0], out[1], out[2]])
        })
        .collect::<Result<_>>()?;
    let sweep = SweepConfig::default();
    let stages = cascade(&mut ctx, &feats, &cams, &VarianceRegularizer { sharpness: SHARPNESS }, &sweep)?;
    let depth = ctx.tape.value(stages[2].depth).data();
    let (lo, hi) = cams[0].depth_range;
    let tol = sweep.intervals[2] * (hi - lo) / 2.0;

    // Interior: masked pixels whose 9x9 neighbourhood is masked and whose
    // surface point lands at least 4 px inside both source images.
    let gt = &views[0];
    let masked = |x: i64, y: i64| x >= 0 && y >= 0 && x < size as i64 && y < size as i64 && gt.mask[y as usize * size + x as usize];
    let (mut interior, mut good, mut worst) = (0usize, 0usize, 0.0f64);
    for y in 0..size {
        for x in 0..size {
            let (xi, yi) = (x as i64, y as i64);
            if !(-4..=4).all(|dy| (-4..=4).all(|dx| masked(xi + dx, yi + dy))) {
                continue;
            }
            let d = gt.gt_depth.data()[y * size + x] as f64;
            let p = cams[0].lift(x as f64, y as f64, d)?;
            let inside = cams[1..].iter().all(|c| match c.project(&p) {
                Ok((u, v, _)) => u >= 4.0 && v >= 4.0 && u <= size as f64 - 5.0 && v <= size as f64 - 5.0,
                Err(_) => false,
            });
            if !inside {
                continue;
            }
            interior += 1;
            let err = (depth[y * size + x] as f64 - d).abs();
            worst = worst.max(err);
            good += (err <= tol) as usize;
        }
    }
    let frac = good as f64 / interior.max(1) as f64;
    Ok(Outcome::new(
        interior > 1000 && frac >= 0.95,
        format!("{good}/{interior} interior pixels within {tol:.4} ({:.1}%), worst {worst:.4}", 100.0 * frac),
    ))
}

fn permuted(view: &MultiLightView, order: &[usize]) -> MultiLightView {
    MultiLightView {
        images: order.iter().map(|&i| view.images[i].clone()).collect(),
        light_dirs: order.iter().map(|&i| view.light_dirs[i]).collect(),
        ..view.clone()
    }
}

pub fn lafm(_: &mut Shared) -> Result<Outcome> {
    let (_, views) = render_scene(&RenderConfig::default(), 1)?;
    let model = Model::new(&ModelConfig::default(), 5)?;
    let orders: [&[usize]; 3] = [&[3, 2, 1, 0], &[1, 3, 0, 2], &[2, 0, 3, 1]];

    let base = view_features(&model, &views[0].images, &views[0].light_dirs)?;
    let mut lafm_same = true;
    for order in orders {
        let p = permuted(&views[0], order);
        lafm_same &= view_features(&model, &p.images, &p.light_dirs)? == base;
    }

    let (reference, sources) = (&views[0], [&views[1], &views[11]]);
    let pred = cascade_infer(&model, reference, &sources)?;
    let mut infer_same = true;
    for order in orders {
        let r = permuted(reference, order);
        let s: Vec<MultiLightView> = sources.iter().map(|v| permuted(v, &[order[1], order[3], order[0], order[2]])).collect();
        let again = cascade_infer(&model, &r, &s.iter().collect::<Vec<_>>())?;
        infer_same &= again.depth == pred.depth && again.normal == pred.normal;
    }

    let mut single_same = true;
    for (img, l) in views[2].images.iter().zip(&views[2].light_dirs) {
        let mut ctx = Ctx::new(&model.store, false);
        let out = model.life_forward(&mut ctx, &[img], &[*l])?;
        let maps = split_batch(&mut ctx.tape, &out, &[0])?.remove(0);
        let agg = lafm_aggregate(&mut ctx.tape, &[maps])?;
        for (a, m) in agg.maps().into_iter().zip(maps) {
            single_same &= ctx.tape.value(a) == ctx.tape.value(m);
        }
    }
    // And on raw tensors with negative entries.
    let mut tape: Tape<f32> = Tape::new();
    let raw = Tensor::from_fn(vec![2, 3, 3], |i| (i as f32 - 8.5) * 0.37);
    let v = tape.constant(raw.clone());
    let agg = lafm_aggregate(&mut tape, &[[v, v, v, v]])?;
    single_same &= agg.maps().iter().all(|&m| tape.value(m) == &raw);

    Ok(Outcome::from_checks(&[
        ("permuted LAFM bit-identical".into(), lafm_same),
        ("permuted cascade_infer bit-identical".into(), infer_same),
        ("single-light LAFM is its input".into(), single_same),
    ]))
}

/// Round-trip agreement over pixels whose surface point is visible in the
/// neighbour: unoccluded along the ray and matched by its depth buffer.
fn neighbour_consistency(scene: &Scene, a: &MultiLightView, b: &MultiLightView, cfg: &FilterConfig) -> (usize, usize) {
    let ra = DepthView { depth: &a.gt_depth, mask: &a.mask, camera: &a.camera };
    let rb = DepthView { depth: &b.gt_depth, mask: &b.mask, camera: &b.camera };
    let w = a.camera.size.1;
    let (mut visible, mut agree) = (0, 0);
    for p in (0..a.mask.len()).filter(|&p| a.mask[p]) {
        let d = a.gt_depth.data()[p] as f64;
        let Ok(pt) = a.camera.lift((p % w) as f64, (p / w) as f64, d) else { continue };
        let Ok((u, v, dz)) = b.camera.project(&pt) else { continue };
        if !b.camera.contains(u, v) {
            continue;
        }
        let to = pt - b.camera.center();
        let dist = to.norm();
        match scene.intersect(&b.camera.center(), &(to / dist), 0.0) {
            Some(hit) if (hit.t - dist).abs() <= 1e-6 * dist => {}
            _ => continue,
        }
        let j = v.round() as usize * b.camera.size.1 + u.round() as usize;
        if !b.mask[j] || (b.gt_depth.data()[j] as f64 - dz).abs() > 0.01 * dz {
            continue;
        }
        visible += 1;
        agree += round_trip(&ra, &rb, p % w, p / w, d, cfg).is_some() as usize;
    }
    (agree, visible)
}

pub fn renderer(_: &mut Shared) -> Result<Outcome> {
    // Limb profile of a matte unit sphere under one light.
    let size = 96;
    let k = Camera::intrinsics_from_fov(9.3, (size, size));
    let cam = Camera::look_at(Vec3::new(0.0, -15.0, 0.0), Vec3::zeros(), Vec3::z(), k, (14.0, 16.0), (size, size))?;
    let (albedo, intensity) = (0.7, 2.0);
    let sphere = Scene {
        primitives: vec![Primitive {
            shape: Shape::Sphere { radius: 1.0 },
            rotation: Mat3::identity(),
            center: Vec3::zeros(),
            material: Material {
                albedo: Texture::Constant(Vec3::repeat(albedo)),
                roughness: 1.0,
                specular_weight: 0.0,
            },
        }],
    };
    let light = Vec3::new(0.3, -0.2, -1.0).normalize();
    let img = &render_radiance(&sphere, &cam, &[light], intensity, 1)[0];
    let gt = ground_truth(&sphere, &cam);
    let masked = |x: usize, y: usize| gt.mask[y * size + x];
    let (mut limb_err, mut limb_pixels) = (0.0f64, 0usize);
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            // Off the silhouette: the pixel and its 4-neighbours hit the sphere.
            if !(masked(x, y) && masked(x - 1, y) && masked(x + 1, y) && masked(x, y - 1) && masked(x, y + 1)) {
                continue;
            }
            let i = y * size + x;
            let cos = gt.normal[i].dot(&light);
            let expect = albedo / PI * intensity * cos.max(0.0);
            for ch in 0..3 {
                let got = img[ch * size * size + i] as f64;
                let err = if expect > 0.0 { (got - expect).abs() / expect } else { got.abs() };
                limb_err = limb_err.max(err);
            }
            limb_pixels += 1;
        }
    }

    // Cap sampling: cos of the polar angle is uniform on [cos cap, 1].
    let cfg = RenderConfig {
        num_lights_per_view: 10_001,
        ..RenderConfig::default()
    };
    let dirs = sample_lights(&cfg, &mut stream(2024, 3, 0, 0));
    let cos_max = cfg.light_cap_deg.to_radians().cos();
    let mut cosines: Vec<f64> = dirs[1..].iter().map(|d| -d.z).collect();
    cosines.sort_by(f64::total_cmp);
    let n = cosines.len() as f64;
    let ks = cosines.iter().enumerate().fold(0.0f64, |acc, (i, c)| {
        let f = ((c - cos_max) / (1.0 - cos_max)).clamp(0.0, 1.0);
        acc.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
    });

    // Ground-truth depth reprojection between neighbouring views.
    let cfg = RenderConfig {
        num_lights_per_view: 1,
        ..RenderConfig::default()
    };
    let filter = FilterConfig::default();
    let (mut agree, mut visible) = (0, 0);
    for s in 0..4 {
        let (scene, views) = render_scene(&cfg, s)?;
        for i in 0..views.len() {
            let (a, v) = neighbour_consistency(&scene, &views[i], &views[(i + 1) % views.len()], &filter);
            agree += a;
            visible += v;
        }
    }
    let frac = agree as f64 / visible.max(1) as f64;
    Ok(Outcome::from_checks(&[
        (format!("limb profile max rel err {limb_err:.1e} over {limb_pixels} px"), limb_pixels > 1000 && limb_err < 0.01),
        (format!("cap KS statistic {ks:.4} (n={})", cosines.len()), cosines.len() >= 10_000 && ks < 0.02),
        (format!("GT reprojection {agree}/{visible} ({:.2}%)", 100.0 * frac), visible > 10_000 && frac >= 0.99),
    ]))
}
