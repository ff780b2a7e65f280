//! Criteria with exact-math oracles: 1, 2, 3 and 9.

use anyhow::Result;
use diffcore::gradcheck::{check, random_tensor, GradCheckConfig};
use diffcore::{Tape, Tensor, Var};
use mvps::fusion_eval::{chamfer_l1, depth_cloud, evaluate, fscore};
use mvps::geometry::{depth_hypotheses, icp_align, warp_pixel, Camera, IcpConfig, RigidTransform, Vec3};
use mvps::plane_sweep::regress_depth;
use mvps::render::{render_scene, RenderConfig};
use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Outcome, Shared};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values in `±[0.1, 1)`, clear of the kink at zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Counts checks per op and remembers the failing ones.
#[derive(Default)]
struct Ledger {
    ops: Vec<(&'static str, usize)>,
    failed: Vec<String>,
    worst: f64,
}

impl Ledger {
    fn grad(&mut self, op: &'static str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> diffcore::Result<Var>) {
        self.grad_with(op, inputs, f, &GradCheckConfig::default());
    }

    fn grad_with(
        &mut self,
        op: &'static str,
        inputs: &[Tensor<f64>],
        f: impl Fn(&mut Tape<f64>, &[Var]) -> diffcore::Result<Var>,
        cfg: &GradCheckConfig,
    ) {
        match self.ops.iter_mut().find(|(name, _)| *name == op) {
            Some(entry) => entry.1 += 1,
            None => self.ops.push((op, 1)),
        }
        let shapes: Vec<_> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        match check(inputs, f, cfg) {
            Ok(report) => {
                self.worst = self.worst.max(report.max_rel_err);
                if !report.passed() {
                    self.failed.push(format!("{op} {shapes:?}"));
                }
            }
            Err(e) => self.failed.push(format!("{op} {shapes:?}: {e}")),
        }
    }
}

pub fn autodiff(_: &mut Shared) -> Result<Outcome> {
    let mut l = Ledger::default();
    let r = &mut rng(101);

    for shape in [vec![7], vec![2, 3], vec![3, 1, 4], vec![2, 2, 2, 2], vec![1, 5, 3]] {
        l.grad("relu", &[away_from_zero(&shape, r)], |t, v| t.relu(v[0]));
    }
    for shape in [vec![4], vec![3, 2], vec![2, 3, 2], vec![1, 1, 5], vec![2, 2, 2, 3]] {
        let ins = [random_tensor(&shape, -1.0, 1.0, r), random_tensor(&shape, -1.0, 1.0, r)];
        let numel: usize = shape.iter().product();
        l.grad("add", &ins, |t, v| t.add(v[0], v[1]));
        l.grad("mul", &ins, |t, v| t.mul(v[0], v[1]));
        l.grad("scale", &ins[..1], |t, v| t.scale(v[0], -2.5));
        l.grad("reshape", &ins[..1], |t, v| t.reshape(v[0], vec![numel]));
        l.grad("sum", &ins[..1], |t, v| t.sum(v[0]));
    }
    for (shape, period) in [(vec![6], 3), (vec![2, 3, 4], 12), (vec![4, 2, 2], 4), (vec![3, 5], 5), (vec![2, 2, 3], 1)] {
        let keep: Vec<bool> = (0..period).map(|_| r.random::<bool>()).collect();
        l.grad("mask_fill", &[random_tensor(&shape, -1.0, 1.0, r)], |t, v| t.mask_fill(v[0], keep.clone()));
    }
    for shape in [vec![3, 1, 1], vec![3, 2, 3], vec![2, 3, 2, 2], vec![3, 4, 1], vec![1, 3, 3, 3]] {
        let x = away_from_zero(&shape, r);
        l.grad("unit_normals", &[x.clone()], |t, v| t.unit_normals(v[0], false));
        l.grad("unit_normals facing", &[x], |t, v| t.unit_normals(v[0], true));
    }
    for (shape, axis) in [(vec![3], 0), (vec![2, 3], 1), (vec![2, 3, 4], 0), (vec![4, 1, 2], 2), (vec![2, 2, 2, 2], 3)] {
        let a = random_tensor(&shape, -1.0, 1.0, r);
        let mut other = shape.clone();
        other[axis] += 1;
        let b = random_tensor(&other, -1.0, 1.0, r);
        l.grad("concat", &[a.clone(), b], |t, v| t.concat(&[v[0], v[1]], axis));
        l.grad("select", &[a.clone()], |t, v| t.select(v[0], shape[0] - 1));
        l.grad("repeat_axis", &[a], |t, v| t.repeat_axis(v[0], axis, 3));
    }
    for (shape, k) in [(vec![5], 2), (vec![2, 3], 3), (vec![3, 2, 2], 4), (vec![1, 6], 2), (vec![2, 2, 2], 5)] {
        // Distinct levels per element keep the probes away from ties.
        let numel: usize = shape.iter().product();
        let mut levels = vec![Vec::with_capacity(numel); k];
        for _ in 0..numel {
            let mut order: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                order.swap(i, r.random_range(0..=i));
            }
            for (j, lv) in levels.iter_mut().enumerate() {
                lv.push(order[j] as f64 * 0.3 + r.random_range(-0.05..0.05));
            }
        }
        let ins: Vec<Tensor<f64>> = levels.into_iter().map(|d| Tensor::new(shape.clone(), d).unwrap()).collect();
        l.grad("elementwise_max", &ins, |t, v| t.elementwise_max(v));
    }
    for (shape, axis) in [(vec![5], 0), (vec![4, 3], 0), (vec![2, 4, 3], 1), (vec![3, 2, 2], 0), (vec![2, 2, 5], 2)] {
        let ins = [random_tensor(&shape, -2.0, 2.0, r), random_tensor(&shape, 0.5, 3.0, r)];
        l.grad("softmax", &ins[..1], |t, v| t.softmax(v[0], axis));
        l.grad("weighted_sum", &ins, |t, v| t.weighted_sum(v[0], v[1], axis));
    }
    for (shape, k) in [(vec![3], 2), (vec![2, 3], 3), (vec![4, 2, 2], 4), (vec![1, 5], 5), (vec![2, 2, 2, 2], 3)] {
        let ins: Vec<Tensor<f64>> = (0..k).map(|_| random_tensor(&shape, -1.0, 1.0, r)).collect();
        l.grad("variance_over_set", &ins, |t, v| t.variance_over_set(v));
    }
    for (c, h, w, gh, gw) in [(1, 3, 3, 2, 2), (2, 4, 5, 3, 3), (3, 2, 2, 1, 4), (1, 5, 4, 2, 3), (2, 3, 6, 4, 2)] {
        let feat = random_tensor(&[c, h, w], -1.0, 1.0, r);
        let grid = Tensor::from_fn(vec![gh, gw, 2], |i| {
            let extent = if i % 2 == 0 { w } else { h } as i64;
            r.random_range(-1..extent) as f64 + r.random_range(0.1..0.9)
        });
        l.grad("bilinear_sample", &[feat, grid], |t, v| t.bilinear_sample(v[0], v[1]));
    }
    for (x, w, s, p) in [
        (vec![1, 1, 5, 5], vec![1, 1, 3, 3], 1, 1),
        (vec![2, 3, 6, 6], vec![4, 3, 3, 3], 2, 1),
        (vec![1, 2, 7, 5], vec![3, 2, 1, 1], 1, 0),
        (vec![2, 2, 6, 6], vec![2, 2, 5, 5], 1, 2),
        (vec![1, 3, 5, 6], vec![2, 3, 3, 3], 2, 0),
    ] {
        let ins = [random_tensor(&x, -1.0, 1.0, r), random_tensor(&w, -1.0, 1.0, r), random_tensor(&[w[0]], -1.0, 1.0, r)];
        l.grad("conv2d", &ins, |t, v| t.conv2d(v[0], v[1], Some(v[2]), s, p));
    }
    for (x, w, s, p) in [
        (vec![1, 1, 3, 3, 3], vec![1, 1, 3, 3, 3], 1, 1),
        (vec![1, 2, 4, 4, 4], vec![3, 2, 3, 3, 3], 2, 1),
        (vec![2, 2, 2, 3, 3], vec![2, 2, 1, 1, 1], 1, 0),
        (vec![1, 3, 4, 3, 5], vec![2, 3, 3, 3, 3], 1, 1),
        (vec![1, 1, 5, 4, 4], vec![2, 1, 3, 3, 3], 2, 0),
    ] {
        let ins = [random_tensor(&x, -1.0, 1.0, r), random_tensor(&w, -1.0, 1.0, r), random_tensor(&[w[0]], -1.0, 1.0, r)];
        l.grad("conv3d", &ins, |t, v| t.conv3d(v[0], v[1], Some(v[2]), s, p));
    }
    for (x, w, s, p) in [
        (vec![1, 1, 3, 3], vec![1, 1, 3, 3], 2, 1),
        (vec![2, 3, 4, 4], vec![3, 2, 3, 3], 2, 1),
        (vec![1, 2, 3, 5], vec![2, 4, 3, 3], 1, 1),
        (vec![1, 2, 2, 2], vec![2, 1, 1, 1], 2, 0),
        (vec![1, 1, 4, 3], vec![1, 3, 5, 5], 1, 2),
    ] {
        let ins = [random_tensor(&x, -1.0, 1.0, r), random_tensor(&w, -1.0, 1.0, r)];
        l.grad("conv_transpose2d", &ins, |t, v| t.conv_transpose2d(v[0], v[1], s, p));
        let (mut x3, mut w3) = (x.clone(), w.clone());
        x3.insert(2, 2);
        w3.insert(2, w[2]);
        let ins = [random_tensor(&x3, -1.0, 1.0, r), random_tensor(&w3, -1.0, 1.0, r)];
        l.grad("conv_transpose3d", &ins, |t, v| t.conv_transpose3d(v[0], v[1], s, p));
    }
    for shape in [vec![2, 3, 4, 4], vec![4, 2, 3], vec![3, 1, 5], vec![2, 2, 2, 2, 2], vec![5, 2]] {
        let c = shape[1];
        let ins = [random_tensor(&shape, -2.0, 2.0, r), random_tensor(&[c], 0.5, 1.5, r), random_tensor(&[c], -0.5, 0.5, r)];
        l.grad("batch_norm_train", &ins, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0));
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        l.grad("batch_norm_eval", &ins, |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5));
    }
    for (h, w) in [(1, 1), (2, 3), (4, 4), (3, 1), (2, 5)] {
        let mut mask: Vec<bool> = (0..h * w).map(|_| r.random::<bool>()).collect();
        mask[0] = true;
        let x = random_tensor(&[h, w], -2.0, 2.0, r);
        // Offsets stay clear of the switch at |d| = beta.
        let target = Tensor::from_fn(vec![h, w], |i| {
            let d = if r.random::<bool>() { r.random_range(0.0..0.8) } else { r.random_range(1.2..2.0) };
            x.data()[i] + if r.random::<bool>() { d } else { -d }
        });
        l.grad("masked_smooth_l1", &[x], |t, v| t.masked_smooth_l1(v[0], &target, &mask, 1.0));
        let gt = random_tensor(&[3, h, w], -1.0, 1.0, r);
        l.grad("masked_cosine_loss", &[random_tensor(&[3, h, w], -1.0, 1.0, r)], |t, v| {
            t.masked_cosine_loss(v[0], &gt, &mask)
        });
    }

    let thin: Vec<String> = l.ops.iter().filter(|(_, n)| *n < 5).map(|(op, n)| format!("{op}={n}")).collect();
    let passed = l.failed.is_empty() && thin.is_empty();
    let mut detail = format!("{} ops x >=5 shapes, worst rel err {:.2e}", l.ops.len(), l.worst);
    if !l.failed.is_empty() {
        detail += &format!("; failed: {}", l.failed.join(", "));
    }
    if !thin.is_empty() {
        detail += &format!("; too few shapes: {}", thin.join(", "));
    }
    Ok(Outcome::new(passed, detail))
}

fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let (az, polar) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.4..1.4f64));
    let r = rng.random_range(14.0..16.5);
    let eye = Vec3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos()) * r;
    let k = Camera::intrinsics_from_fov(9.3, (64, 64));
    Camera::look_at(eye, Vec3::zeros(), Vec3::z(), k, (r - 1.0, r + 1.0), (64, 64)).unwrap()
}

pub fn geometry(_: &mut Shared) -> Result<Outcome> {
    let r = &mut rng(202);
    let (mut warp_err, mut lift_err) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let cam = random_camera(r);
        for _ in 0..50 {
            let (u, v) = (r.random_range(0.0..63.0), r.random_range(0.0..63.0));
            let d = r.random_range(cam.depth_range.0..cam.depth_range.1);
            let (wu, wv) = warp_pixel(u, v, d, &cam, &cam)?;
            warp_err = warp_err.max((wu - u).abs()).max((wv - v).abs());
            let (pu, pv, pz) = cam.project(&cam.lift(u, v, d)?)?;
            lift_err = lift_err.max((pu - u).abs()).max((pv - v).abs());
            lift_err = lift_err.max((pz - d).abs() / d);
        }
    }
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let prev = Tensor::from_fn(vec![h, w], |_| r.random_range(1.0..30.0f32));
        let delta = r.random_range(0.01..5.0);
        let count = r.random_range(2..64);
        let hyp = depth_hypotheses(&prev, delta, count)?;
        for k in 0..count {
            for (i, &p) in prev.data().iter().enumerate() {
                let direct = (p as f64 + delta * (k as f64 / (count - 1) as f64 - 0.5)) as f32;
                mismatches += (hyp.h.data()[k * h * w + i] != direct) as usize;
            }
        }
    }
    Ok(Outcome::from_checks(&[
        (format!("warp identity max {warp_err:.1e} px"), warp_err < 1e-6),
        (format!("project∘lift max {lift_err:.1e} px"), lift_err < 1e-5),
        (format!("hypothesis grids, 100 triples, {mismatches} mismatches"), mismatches == 0),
    ]))
}

fn random_f32(shape: &[usize], lo: f32, hi: f32, r: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

fn widen(t: &Tensor<f32>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x as f64).collect()).unwrap()
}

pub fn regression(_: &mut Shared) -> Result<Outcome> {
    let r = &mut rng(303);
    // Variance of the cost volume against a scalar f64 oracle.
    let mut var_err = 0.0f64;
    for _ in 0..50 {
        let views = r.random_range(2..6);
        let shape = [r.random_range(1..5), r.random_range(2..9), r.random_range(1..7), r.random_range(1..7)];
        let vols: Vec<Tensor<f32>> = (0..views).map(|_| random_f32(&shape, -1.0, 1.0, r)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = vols.iter().map(|v| tape.constant(v.clone())).collect();
        let out = tape.variance_over_set(&vars)?;
        for (i, &got) in tape.value(out).data().iter().enumerate() {
            let xs: Vec<f64> = vols.iter().map(|v| v.data()[i] as f64).collect();
            let mean = xs.iter().sum::<f64>() / views as f64;
            let oracle = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / views as f64;
            var_err = var_err.max((got as f64 - oracle).abs());
        }
    }
    // Softmax followed by the expectation over hypotheses.
    let (mut soft64, mut soft32) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (n, h, w) = (r.random_range(2..49), r.random_range(1..7), r.random_range(1..7));
        let prev = random_f32(&[h, w], 2.0, 30.0, r);
        let hyp = depth_hypotheses(&prev, r.random_range(0.05..4.0), n)?;
        let logits = random_f32(&[n, h, w], -8.0, 8.0, r);
        let oracle = |p: usize| {
            let col: Vec<f64> = (0..n).map(|k| logits.data()[k * h * w + p] as f64).collect();
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = col.iter().map(|c| (c - m).exp()).sum();
            (0..n).map(|k| (col[k] - m).exp() / z * hyp.h.data()[k * h * w + p] as f64).sum::<f64>()
        };
        let mut t64: Tape<f64> = Tape::new();
        let l = t64.constant(widen(&logits));
        let hv = t64.constant(widen(&hyp.h));
        let p = t64.softmax(l, 0)?;
        let d = t64.weighted_sum(p, hv, 0)?;
        let mut t32: Tape<f32> = Tape::new();
        let l = t32.constant(logits.clone());
        let p32 = t32.softmax(l, 0)?;
        let d32 = regress_depth(&mut t32, p32, &hyp)?;
        for px in 0..h * w {
            let o = oracle(px);
            soft64 = soft64.max((t64.value(d).data()[px] - o).abs());
            soft32 = soft32.max((t32.value(d32).data()[px] as f64 - o).abs() / o.abs());
        }
    }
    // One-hot probabilities return the selected hypothesis.
    let mut onehot_mismatch = 0usize;
    for _ in 0..50 {
        let (n, h, w) = (r.random_range(2..49), r.random_range(1..7), r.random_range(1..7));
        let hyp = depth_hypotheses(&random_f32(&[h, w], 2.0, 30.0, r), r.random_range(0.05..4.0), n)?;
        let pick: Vec<usize> = (0..h * w).map(|_| r.random_range(0..n)).collect();
        let prob = Tensor::from_fn(vec![n, h, w], |i| (pick[i % (h * w)] == i / (h * w)) as u8 as f32);
        let mut tape: Tape<f32> = Tape::new();
        let p = tape.constant(prob);
        let d = regress_depth(&mut tape, p, &hyp)?;
        for (px, &k) in pick.iter().enumerate() {
            onehot_mismatch += (tape.value(d).data()[px] != hyp.h.data()[k * h * w + px]) as usize;
        }
    }
    Ok(Outcome::from_checks(&[
        (format!("variance max abs err {var_err:.1e}"), var_err < 1e-6),
        (format!("soft-argmax f64 max abs err {soft64:.1e}"), soft64 < 1e-6),
        (format!("soft-argmax f32 max rel err {soft32:.1e}"), soft32 < 1e-6),
        (format!("one-hot mismatches {onehot_mismatch}"), onehot_mismatch == 0),
    ]))
}

fn brute_nearest(p: &Vec3, set: &[Vec3]) -> f64 {
    set.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)
}

fn rigid(axis: Vec3, deg: f64, shift: Vec3) -> RigidTransform {
    RigidTransform {
        rotation: Rotation3::from_axis_angle(&Unit::new_normalize(axis), deg.to_radians()).into_inner(),
        translation: shift,
    }
}

pub fn metrics(_: &mut Shared) -> Result<Outcome> {
    let r = &mut rng(909);
    let cloud = |n: usize, r: &mut ChaCha8Rng| -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect()
    };
    let (mut chamfer_err, mut fscore_err) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let (a, b) = (cloud(200, r), cloud(200, r));
        let ab: Vec<f64> = a.iter().map(|p| brute_nearest(p, &b)).collect();
        let ba: Vec<f64> = b.iter().map(|p| brute_nearest(p, &a)).collect();
        let oracle = ab.iter().sum::<f64>() / 200.0 + ba.iter().sum::<f64>() / 200.0;
        chamfer_err = chamfer_err.max((chamfer_l1(&a, &b)? - oracle).abs());
        for d in [0.05, 0.1, 0.2] {
            let precision = ab.iter().filter(|&&x| x < d).count() as f64 / 200.0;
            let recall = ba.iter().filter(|&&x| x < d).count() as f64 / 200.0;
            let f = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            fscore_err = fscore_err.max((fscore(&a, &b, d)?.fscore - f).abs());
        }
    }
    let same = cloud(200, r);
    let identical = chamfer_l1(&same, &same)? == 0.0 && fscore(&same, &same, 0.01)?.fscore == 1.0;

    // Known perturbations of a ground-truth surface cloud.
    let cfg = RenderConfig {
        num_lights_per_view: 1,
        ..RenderConfig::default()
    };
    let (_, views) = render_scene(&cfg, 0)?;
    let gt = depth_cloud(
        &views.iter().map(|v| &v.gt_depth).collect::<Vec<_>>(),
        &views.iter().map(|v| &v.gt_normal).collect::<Vec<_>>(),
        &views.iter().map(|v| v.mask.as_slice()).collect::<Vec<_>>(),
        &views.iter().map(|v| v.camera.clone()).collect::<Vec<_>>(),
    )?;
    let pts: Vec<Vec3> = gt.points.iter().step_by(4).copied().collect();
    let (lo, hi) = pts.iter().fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| {
        (lo.inf(p), hi.sup(p))
    });
    let diameter = (hi - lo).norm();
    let (mut icp_err, mut eval_chamfer) = (0.0f64, 0.0f64);
    for k in 0..4 {
        let axis = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let dir = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize();
        // The first perturbation sits at both limits.
        let (deg, frac) = if k == 0 { (10.0, 0.02) } else { (r.random_range(-10.0..10.0), r.random_range(0.0..0.02)) };
        let t = rigid(axis, deg, dir * frac * diameter);
        let moved: Vec<Vec3> = pts.iter().map(|p| t.apply(p)).collect();
        let fit = icp_align(&moved, &pts, &IcpConfig::default())?;
        let residual = fit.compose(&t);
        icp_err = icp_err.max(residual.rotation_angle()).max(residual.translation.norm());
        eval_chamfer = eval_chamfer.max(evaluate(&moved, &pts, 0.01 * diameter, true)?.chamfer_l1);
    }
    Ok(Outcome::from_checks(&[
        (format!("chamfer vs brute force {chamfer_err:.1e}"), chamfer_err < 1e-9),
        (format!("F-score vs brute force {fscore_err:.1e}"), fscore_err < 1e-9),
        ("identical clouds give (0, 1)".into(), identical),
        (format!("ICP residual {icp_err:.1e} over {} points", pts.len()), icp_err < 1e-4),
        (format!("aligned chamfer {eval_chamfer:.1e}"), eval_chamfer < 1e-3),
    ]))
}
