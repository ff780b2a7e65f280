//! Cascaded plane sweep: feature volumes, variance aggregation, cost
//! regularisation, soft-argmax depth and the multi-task training loss.

use diffcore::{Tape, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{config, MvpsError, Result};
use crate::geometry::{depth_hypotheses, upsample_depth, warp_pixel, Camera, DepthHypotheses, Vec3};
use crate::network::{lafm_aggregate, split_batch, Ctx, Model, ModelConfig, ParamStore};
use crate::render::MultiLightView;

/// Stage resolutions relative to the input image.
pub const STAGE_SCALES: [f64; 3] = [0.25, 0.5, 1.0];

/// Grid coordinate given to warps that fall behind a source camera; far
/// enough outside any image that every bilinear tap reads zero.
const OFF_IMAGE: f32 = -1.0e4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepConfig {
    pub counts: [usize; 3],
    /// Fractions of the reference depth range.
    pub intervals: [f64; 3],
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self::from_model(&ModelConfig::default())
    }
}

impl SweepConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            counts: cfg.counts(),
            intervals: cfg.intervals(),
        }
    }
}

/// Maps an aggregated volume `[C, Ns, H, W]` to hypothesis logits
/// `[Ns, H, W]`.
pub trait Regularizer {
    fn logits(&self, ctx: &mut Ctx, volume: Var, stage: usize) -> Result<Var>;
}

impl Regularizer for Model {
    fn logits(&self, ctx: &mut Ctx, volume: Var, stage: usize) -> Result<Var> {
        self.cost_logits(ctx, volume, stage)
    }
}

/// Hand-made regulariser scoring each hypothesis by `-sharpness` times the
/// channel-mean variance.
#[derive(Clone, Copy, Debug)]
pub struct VarianceRegularizer {
    pub sharpness: f32,
}

impl Regularizer for VarianceRegularizer {
    fn logits(&self, ctx: &mut Ctx, volume: Var, _stage: usize) -> Result<Var> {
        let shape = ctx.tape.shape(volume).to_vec();
        if shape.len() != 4 {
            return Err(config(format!("cost volume must be [C,Ns,H,W], got {shape:?}")));
        }
        let weights = ctx.tape.constant(Tensor::full(shape.clone(), -self.sharpness / shape[0] as f32));
        Ok(ctx.tape.weighted_sum(weights, volume, 0)?)
    }
}

/// Source-view feature volume `[C, Ns, Hs, Ws]`: each hypothesis slice
/// samples `feature` at the warp of every reference pixel. Also returns,
/// per pixel, whether any hypothesis lands inside the source image.
pub fn build_feature_volume(
    tape: &mut Tape<f32>,
    feature: Var,
    hyp: &DepthHypotheses,
    reference: &Camera,
    src: &Camera,
) -> Result<(Var, Vec<bool>)> {
    let fs = tape.shape(feature).to_vec();
    let hs = hyp.h.shape();
    let (n, h, w) = (hs[0], hs[1], hs[2]);
    if fs.len() != 3 || reference.size != (h, w) || src.size != (fs[1], fs[2]) {
        return Err(config(format!(
            "feature {fs:?} / hypotheses {hs:?} disagree with camera sizes {:?}, {:?}",
            reference.size, src.size
        )));
    }
    let plane = h * w;
    let hv = hyp.h.data();
    let per_slice: Vec<(Vec<f32>, Vec<bool>)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut grid = Vec::with_capacity(2 * plane);
            let mut seen = vec![false; plane];
            for (p, seen) in seen.iter_mut().enumerate() {
                let (y, x) = (p / w, p % w);
                let d = hv[k * plane + p] as f64;
                match warp_pixel(x as f64, y as f64, d, reference, src) {
                    Ok((u, v)) => {
                        *seen = src.contains(u, v);
                        grid.extend([u as f32, v as f32]);
                    }
                    Err(_) => grid.extend([OFF_IMAGE, OFF_IMAGE]),
                }
            }
            (grid, seen)
        })
        .collect();
    let mut grid = Vec::with_capacity(2 * n * plane);
    let mut valid = vec![false; plane];
    for (g, seen) in per_slice {
        grid.extend(g);
        valid.iter_mut().zip(seen).for_each(|(a, b)| *a |= b);
    }
    let grid = tape.constant(Tensor::new(vec![n * h, w, 2], grid)?);
    let sampled = tape.bilinear_sample(feature, grid)?;
    Ok((tape.reshape(sampled, vec![fs[0], n, h, w])?, valid))
}

/// Expected depth `Σ_w p(w) h(w)` over the leading axis.
pub fn regress_depth(tape: &mut Tape<f32>, prob: Var, hyp: &DepthHypotheses) -> Result<Var> {
    let h = tape.constant(hyp.h.clone());
    Ok(tape.weighted_sum(prob, h, 0)?)
}

/// One cascade stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub camera: Camera,
    pub hypotheses: DepthHypotheses,
    /// `[Ns, Hs, Ws]`.
    pub prob: Var,
    /// `[Hs, Ws]`.
    pub depth: Var,
    /// Pixels seen inside at least one source image.
    pub valid: Vec<bool>,
}

/// Runs the three sweep stages. `features[i]` holds `(F1, F2, F3)` of view
/// `i` (reference first) without batch axis, `cameras[i]` its full-resolution
/// camera.
pub fn cascade(
    ctx: &mut Ctx,
    features: &[[Var; 3]],
    cameras: &[Camera],
    reg: &dyn Regularizer,
    sweep: &SweepConfig,
) -> Result<Vec<StageOutput>> {
    if features.len() != cameras.len() || features.len() < 2 {
        return Err(config(format!(
            "cascade needs a reference and at least one source, got {} feature sets and {} cameras",
            features.len(),
            cameras.len()
        )));
    }
    let (d_lo, d_hi) = cameras[0].depth_range;
    let mut stages: Vec<StageOutput> = Vec::with_capacity(3);
    for s in 0..3 {
        let cams: Vec<Camera> = cameras.iter().map(|c| c.scaled(STAGE_SCALES[s])).collect();
        let (h, w) = cams[0].size;
        let prev = match stages.last() {
            None => Tensor::full(vec![h, w], (0.5 * (d_lo + d_hi)) as f32),
            Some(st) => upsample_depth(ctx.tape.value(st.depth))?,
        };
        if prev.shape() != [h, w] {
            return Err(config(format!("stage {} expects {h}x{w}, previous depth is {:?}", s + 1, prev.shape())));
        }
        let hyp = depth_hypotheses(&prev, sweep.intervals[s] * (d_hi - d_lo), sweep.counts[s])?;
        let reference = features[0][s];
        let rs = ctx.tape.shape(reference).to_vec();
        if rs.len() != 3 || (rs[1], rs[2]) != (h, w) {
            return Err(config(format!("stage {} reference features {rs:?} do not match {h}x{w}", s + 1)));
        }
        let mut volumes = vec![ctx.tape.repeat_axis(reference, 1, hyp.count)?];
        let mut valid = vec![false; h * w];
        for (f, cam) in features[1..].iter().zip(&cams[1..]) {
            let (vol, seen) = build_feature_volume(&mut ctx.tape, f[s], &hyp, &cams[0], cam)?;
            volumes.push(vol);
            valid.iter_mut().zip(seen).for_each(|(a, b)| *a |= b);
        }
        let agg = ctx.tape.variance_over_set(&volumes)?;
        let logits = reg.logits(ctx, agg, s + 1)?;
        // Unseen pixels get flat logits and so a uniform distribution.
        let logits = ctx.tape.mask_fill(logits, valid.clone())?;
        let prob = ctx.tape.softmax(logits, 0)?;
        let depth = regress_depth(&mut ctx.tape, prob, &hyp)?;
        stages.push(StageOutput {
            camera: cams[0].clone(),
            hypotheses: hyp,
            prob,
            depth,
            valid,
        });
    }
    Ok(stages)
}

/// Final per-view output.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPrediction {
    /// `[H, W]`.
    pub depth: Tensor<f32>,
    /// `[3, H, W]`, camera frame.
    pub normal: Tensor<f32>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub depth: f32,
    pub normal: f32,
    pub stages: [f32; 3],
    /// Smooth-L1 transition point in scene units.
    pub huber_beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 10.0,
            normal: 1.0,
            stages: [1.0; 3],
            huber_beta: 1.0,
        }
    }
}

/// Nearest downsampling by an integer stride: output pixel `j` takes input
/// pixel `stride · j`. Works on `[H, W]` and `[C, H, W]`.
pub fn downsample_nearest(t: &Tensor<f32>, stride: usize) -> Result<Tensor<f32>> {
    let shape = t.shape();
    let (c, h, w) = match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(config(format!("cannot downsample shape {shape:?}"))),
    };
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(config(format!("{h}x{w} is not divisible by {stride}")));
    }
    let (oh, ow) = (h / stride, w / stride);
    let d = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            out.extend((0..ow).map(|x| d[(ci * h + y * stride) * w + x * stride]));
        }
    }
    let mut oshape = shape.to_vec();
    let r = oshape.len();
    oshape[r - 2] = oh;
    oshape[r - 1] = ow;
    Ok(Tensor::new(oshape, out)?)
}

pub fn downsample_mask(mask: &[bool], size: (usize, usize), stride: usize) -> Vec<bool> {
    let (h, w) = size;
    (0..h / stride)
        .flat_map(|y| (0..w / stride).map(move |x| mask[y * stride * w + x * stride]))
        .collect()
}

/// Mean of a `[C, H, W]` map over `(stride+1)²` windows centred on pixel
/// `stride · j`, clipped at the border. Matches the pixel convention of
/// [`Camera::scaled`].
pub fn downsample_centered_box(t: &Tensor<f32>, stride: usize) -> Result<Tensor<f32>> {
    let shape = t.shape();
    if shape.len() != 3 || stride == 0 || shape[1] % stride != 0 || shape[2] % stride != 0 {
        return Err(config(format!("cannot box-downsample {shape:?} by {stride}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / stride, w / stride);
    let r = (stride / 2) as isize;
    let d = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (cy, cx) = ((y * stride) as isize, (x * stride) as isize);
                let (mut sum, mut n) = (0.0f64, 0usize);
                for yy in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
                    for xx in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                        sum += d[(ci * h + yy as usize) * w + xx as usize] as f64;
                        n += 1;
                    }
                }
                out.push((sum / n as f64) as f32);
            }
        }
    }
    Ok(Tensor::new(vec![c, oh, ow], out)?)
}

/// Loss terms of one training sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub stage_depth: [f32; 3],
    pub normal: f32,
    pub total: f32,
}

/// `λ_d Σ_s λ_s smoothL1(D_s, GT_s) + λ_n (1 − cos)` over the reference
/// mask, with stage ground truth taken by nearest downsampling.
pub fn compute_loss(
    tape: &mut Tape<f32>,
    stages: &[StageOutput],
    normal: Var,
    gt_depth: &Tensor<f32>,
    gt_normal: &Tensor<f32>,
    mask: &[bool],
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    if stages.len() != 3 || gt_depth.rank() != 2 {
        return Err(config("loss needs three stages and a [H,W] depth"));
    }
    let size = (gt_depth.shape()[0], gt_depth.shape()[1]);
    if !mask.iter().any(|&m| m) {
        return Err(MvpsError::Empty("loss mask"));
    }
    let mut terms = Vec::with_capacity(4);
    let mut parts = LossParts {
        stage_depth: [0.0; 3],
        normal: 0.0,
        total: 0.0,
    };
    for (s, st) in stages.iter().enumerate() {
        let stride = (1.0 / STAGE_SCALES[s]).round() as usize;
        let gt = downsample_nearest(gt_depth, stride)?;
        let m = downsample_mask(mask, size, stride);
        if !m.iter().any(|&v| v) {
            return Err(MvpsError::Empty("stage loss mask"));
        }
        let l = tape.masked_smooth_l1(st.depth, &gt, &m, weights.huber_beta)?;
        parts.stage_depth[s] = tape.value(l).data()[0];
        terms.push(tape.scale(l, weights.depth * weights.stages[s])?);
    }
    let ln = tape.masked_cosine_loss(normal, gt_normal, mask)?;
    parts.normal = tape.value(ln).data()[0];
    terms.push(tape.scale(ln, weights.normal)?);
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    parts.total = tape.value(total).data()[0];
    Ok((total, parts))
}

/// The `count` views whose camera centres lie closest to view `reference`,
/// nearest first, ties by index.
pub fn select_sources(cameras: &[Camera], reference: usize, count: usize) -> Vec<usize> {
    let c = cameras[reference].center();
    let mut others: Vec<(f64, usize)> = cameras
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != reference)
        .map(|(i, cam)| ((cam.center() - c).norm(), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Light-aggregated maps of one view as plain tensors `[NF, F1, F2, F3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    pub maps: [Tensor<f32>; 4],
}

/// LIFE on each lighting separately (eval mode), then LAFM.
pub fn view_features(model: &Model, images: &[Tensor<f32>], lights: &[Vec3]) -> Result<ViewFeatures> {
    if images.is_empty() || images.len() != lights.len() {
        return Err(config(format!("{} images with {} lights", images.len(), lights.len())));
    }
    let per_light: Vec<[Tensor<f32>; 4]> = images
        .par_iter()
        .zip(lights.par_iter())
        .map(|(img, l)| -> Result<[Tensor<f32>; 4]> {
            let mut ctx = Ctx::new(&model.store, false);
            let out = model.life_forward(&mut ctx, &[img], &[*l])?;
            let maps = split_batch(&mut ctx.tape, &out, &[0])?.remove(0);
            Ok(maps.map(|v| ctx.tape.value(v).clone()))
        })
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let vars: Vec<[Var; 4]> = per_light
        .into_iter()
        .map(|maps| maps.map(|t| tape.constant(t)))
        .collect();
    let lafm = lafm_aggregate(&mut tape, &vars)?;
    Ok(ViewFeatures {
        maps: lafm.maps().map(|v| tape.value(v).clone()),
    })
}

/// Depth and normal for a reference view from cached per-view features.
pub fn predict_view(
    model: &Model,
    reference: &ViewFeatures,
    sources: &[&ViewFeatures],
    cameras: &[Camera],
    mask: &[bool],
) -> Result<ViewPrediction> {
    let mut ctx = Ctx::new(&model.store, false);
    let mut feats = Vec::with_capacity(1 + sources.len());
    for vf in std::iter::once(reference).chain(sources.iter().copied()) {
        let [_, f1, f2, f3] = &vf.maps;
        feats.push([f1, f2, f3].map(|t| ctx.tape.constant(t.clone())));
    }
    let nf = ctx.tape.constant(reference.maps[0].clone());
    let normal = model.normal_regress(&mut ctx, nf)?;
    let stages = cascade(&mut ctx, &feats, cameras, model, &SweepConfig::from_model(&model.cfg))?;
    let (h, w) = cameras[0].size;
    if mask.len() != h * w {
        return Err(config("mask does not match the reference image"));
    }
    Ok(ViewPrediction {
        depth: ctx.tape.value(stages[2].depth).clone(),
        normal: ctx.tape.value(normal).clone(),
        mask: mask.to_vec(),
    })
}

/// Full inference for one reference view: LIFE per lighting, LAFM per
/// view, normal head and the three-stage sweep.
pub fn cascade_infer(model: &Model, reference: &MultiLightView, sources: &[&MultiLightView]) -> Result<ViewPrediction> {
    let size = reference.size();
    if sources.is_empty() {
        return Err(config("inference needs at least one source view"));
    }
    if sources.iter().any(|v| v.size() != size) {
        return Err(config("views differ in image size"));
    }
    let rf = view_features(model, &reference.images, &reference.light_dirs)?;
    let sf = sources
        .iter()
        .map(|v| view_features(model, &v.images, &v.light_dirs))
        .collect::<Result<Vec<_>>>()?;
    let cameras: Vec<Camera> = std::iter::once(reference)
        .chain(sources.iter().copied())
        .map(|v| v.camera.clone())
        .collect();
    predict_view(model, &rf, &sf.iter().collect::<Vec<_>>(), &cameras, &reference.mask)
}

/// Window of a view, with matching camera and ground truth.
pub fn crop_view(view: &MultiLightView, x0: usize, y0: usize, size: (usize, usize)) -> Result<MultiLightView> {
    let (h, w) = view.size();
    if x0 + size.1 > w || y0 + size.0 > h {
        return Err(config(format!("crop {size:?} at ({x0}, {y0}) exceeds {h}x{w}")));
    }
    let crop = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let c = if t.rank() == 3 { t.shape()[0] } else { 1 };
        let mut out = Vec::with_capacity(c * size.0 * size.1);
        for ci in 0..c {
            for y in y0..y0 + size.0 {
                let row = (ci * h + y) * w;
                out.extend_from_slice(&t.data()[row + x0..row + x0 + size.1]);
            }
        }
        let mut shape = t.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = size.0;
        shape[r - 1] = size.1;
        Ok(Tensor::new(shape, out)?)
    };
    Ok(MultiLightView {
        images: view.images.iter().map(crop).collect::<Result<_>>()?,
        light_dirs: view.light_dirs.clone(),
        camera: view.camera.cropped(x0, y0, size),
        gt_depth: crop(&view.gt_depth)?,
        gt_normal: crop(&view.gt_normal)?,
        mask: (y0..y0 + size.0)
            .flat_map(|y| (x0..x0 + size.1).map(move |x| view.mask[y * w + x]))
            .collect(),
    })
}

/// Reference view followed by its sources, each cropped and restricted to
/// a subset of lightings.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub views: Vec<MultiLightView>,
}

/// Random `crop`-sized window of the reference; each source window is
/// centred on the projection of the surface point seen at the reference
/// window's centre. Every view keeps `lights` randomly chosen lightings.
pub fn training_sample(
    views: &[MultiLightView],
    reference: usize,
    sources: &[usize],
    lights: usize,
    crop: usize,
    rng: &mut impl Rng,
) -> Result<TrainingSample> {
    let refv = &views[reference];
    let (h, w) = refv.size();
    if crop % 4 != 0 || crop > h || crop > w {
        return Err(config(format!("crop {crop} must be a multiple of 4 within {h}x{w}")));
    }
    let x0 = rng.random_range(0..=w - crop);
    let y0 = rng.random_range(0..=h - crop);
    let (cx, cy) = (x0 + crop / 2, y0 + crop / 2);
    let (lo, hi) = refv.camera.depth_range;
    let d = match refv.mask[cy * w + cx] {
        true => refv.gt_depth.data()[cy * w + cx] as f64,
        false => 0.5 * (lo + hi),
    };
    let centre = refv.camera.lift(cx as f64, cy as f64, d)?;
    let mut out = Vec::with_capacity(1 + sources.len());
    for (k, &i) in std::iter::once(&reference).chain(sources).enumerate() {
        let v = &views[i];
        let (sx, sy) = match k {
            0 => (x0, y0),
            _ => {
                let (u, vv, _) = v.camera.project(&centre)?;
                let place = |c: f64, n: usize| (c.round() as i64 - (crop / 2) as i64).clamp(0, (n - crop) as i64) as usize;
                (place(u, w), place(vv, h))
            }
        };
        let mut cv = crop_view(v, sx, sy, (crop, crop))?;
        let m = cv.images.len();
        let chosen = rand::seq::index::sample(rng, m, lights.min(m)).into_vec();
        cv.images = chosen.iter().map(|&j| cv.images[j].clone()).collect();
        cv.light_dirs = chosen.iter().map(|&j| cv.light_dirs[j]).collect();
        out.push(cv);
    }
    Ok(TrainingSample { views: out })
}

/// Training-mode forward pass and loss for one sample. All lightings of all
/// views go through LIFE as one batch.
pub fn sample_loss(ctx: &mut Ctx, model: &Model, sample: &TrainingSample, weights: &LossWeights) -> Result<(Var, LossParts)> {
    let images: Vec<&Tensor<f32>> = sample.views.iter().flat_map(|v| v.images.iter()).collect();
    let lights: Vec<Vec3> = sample.views.iter().flat_map(|v| v.light_dirs.iter().copied()).collect();
    let out = model.life_forward(ctx, &images, &lights)?;
    let mut row = 0;
    let mut lafms = Vec::with_capacity(sample.views.len());
    for v in &sample.views {
        let rows: Vec<usize> = (row..row + v.images.len()).collect();
        row += v.images.len();
        let per_light = split_batch(&mut ctx.tape, &out, &rows)?;
        lafms.push(lafm_aggregate(&mut ctx.tape, &per_light)?);
    }
    let normal = model.normal_regress(ctx, lafms[0].nf)?;
    let feats: Vec<[Var; 3]> = lafms.iter().map(|l| l.scales()).collect();
    let cameras: Vec<Camera> = sample.views.iter().map(|v| v.camera.clone()).collect();
    let stages = cascade(ctx, &feats, &cameras, model, &SweepConfig::from_model(&model.cfg))?;
    let r = &sample.views[0];
    compute_loss(&mut ctx.tape, &stages, normal, &r.gt_depth, &r.gt_normal, &r.mask, weights)
}

/// Store with no parameters, for sweeps driven by [`VarianceRegularizer`].
pub fn empty_store() -> ParamStore {
    ParamStore::new()
}
