//! Training loop, optimiser and held-out depth/normal evaluation.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mvps::dataset::{read_scene, with_lights, Manifest, Split};
use mvps::network::{apply_bn_updates, Ctx, Model, ParamId, ParamStore};
use mvps::plane_sweep::{
    downsample_mask, predict_view, sample_loss, select_sources, training_sample, view_features, LossParts, LossWeights,
    TrainingSample, ViewPrediction,
};
use mvps::render::MultiLightView;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PipelineConfig, TrainConfig};

/// Adam with bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.ids().map(|i| vec![0.0; store.get(i).numel()]).collect();
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f32>)], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((p, &g), m), v) in store.get_mut(*id).data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Learning rate after halving at every step already reached.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    let halvings = cfg.lr_decay_steps.iter().filter(|&&s| epoch >= s).count();
    cfg.learning_rate * 0.5f64.powi(halvings as i32)
}

/// All scenes of one split, in manifest order.
pub fn load_split(data: &Path, split: Split) -> Result<Vec<(String, Vec<MultiLightView>)>> {
    let manifest = Manifest::read(data)?;
    manifest
        .split(split)
        .into_iter()
        .map(|name| Ok((name.to_string(), read_scene(data, name)?)))
        .collect()
}

/// Mean masked depth error and mean normal angle (degrees) over a split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOut {
    pub depth_mae: f64,
    pub normal_deg: f64,
    pub pixels: usize,
}

/// Predictions for every view of a scene, using the first `lights`
/// lightings and the `sources` nearest views.
pub fn predict_scene(model: &Model, views: &[MultiLightView], lights: usize, sources: usize) -> Result<Vec<ViewPrediction>> {
    let feats = views
        .iter()
        .map(|v| {
            let v = with_lights(v, lights);
            view_features(model, &v.images, &v.light_dirs)
        })
        .collect::<mvps::Result<Vec<_>>>()?;
    let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
    (0..views.len())
        .map(|i| {
            let src = select_sources(&cams, i, sources);
            let sf: Vec<_> = src.iter().map(|&j| &feats[j]).collect();
            let sc: Vec<_> = std::iter::once(i).chain(src.iter().copied()).map(|j| cams[j].clone()).collect();
            Ok(predict_view(model, &feats[i], &sf, &sc, &views[i].mask)?)
        })
        .collect()
}

pub fn held_out_error(model: &Model, scenes: &[(String, Vec<MultiLightView>)], lights: usize, sources: usize) -> Result<HeldOut> {
    let (mut depth_sum, mut angle_sum, mut pixels) = (0.0f64, 0.0f64, 0usize);
    for (_, views) in scenes {
        let preds = predict_scene(model, views, lights, sources)?;
        for (p, v) in preds.iter().zip(views) {
            let plane = v.mask.len();
            let (pn, gn) = (p.normal.data(), v.gt_normal.data());
            for i in (0..plane).filter(|&i| v.mask[i]) {
                depth_sum += (p.depth.data()[i] as f64 - v.gt_depth.data()[i] as f64).abs();
                let dot: f64 = (0..3).map(|c| pn[c * plane + i] as f64 * gn[c * plane + i] as f64).sum();
                angle_sum += dot.clamp(-1.0, 1.0).acos().to_degrees();
                pixels += 1;
            }
        }
    }
    if pixels == 0 {
        bail!("held-out split has no masked pixels");
    }
    Ok(HeldOut {
        depth_mae: depth_sum / pixels as f64,
        normal_deg: angle_sum / pixels as f64,
        pixels,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub depth_loss: [f64; 3],
    pub normal_loss: f64,
    pub samples: usize,
    pub held_out: Option<HeldOut>,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch={} lr={:e} samples={} loss={:.6} depth1={:.6} depth2={:.6} depth3={:.6} normal={:.6}",
            self.epoch,
            self.learning_rate,
            self.samples,
            self.loss,
            self.depth_loss[0],
            self.depth_loss[1],
            self.depth_loss[2],
            self.normal_loss
        );
        if let Some(h) = self.held_out {
            s.push_str(&format!(" heldout_depth_mae={:.6} heldout_normal_deg={:.4}", h.depth_mae, h.normal_deg));
        }
        s
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Weights with the lowest held-out depth error seen.
    pub best: Model,
    pub initial: HeldOut,
    pub records: Vec<EpochRecord>,
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 32) ^ b);
    rng
}

/// Crop whose coarsest stage still sees part of the object; `None` after
/// repeated misses.
fn draw_sample(
    views: &[MultiLightView],
    reference: usize,
    sources: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<TrainingSample>> {
    const ATTEMPTS: usize = 16;
    for _ in 0..ATTEMPTS {
        let s = training_sample(views, reference, sources, cfg.lights_per_sample, cfg.crop, rng)?;
        let r = &s.views[0];
        if downsample_mask(&r.mask, r.size(), 4).iter().any(|&m| m) {
            return Ok(Some(s));
        }
    }
    Ok(None)
}

fn sample_step(model: &Model, sample: &TrainingSample, weights: &LossWeights) -> mvps::Result<(Vec<(ParamId, Vec<f32>)>, Vec<(ParamId, ParamId, diffcore::BatchStats<f32>)>, LossParts)> {
    let mut ctx = Ctx::new(&model.store, true);
    let (loss, parts) = sample_loss(&mut ctx, model, sample, weights)?;
    ctx.tape.backward(loss)?;
    let grads = ctx.gradients().into_iter().map(|(id, g)| (id, g.into_data())).collect();
    Ok((grads, ctx.bn_updates().to_vec(), parts))
}

/// Trains from scratch on the training split; held-out numbers use the
/// test split.
pub fn train(cfg: &PipelineConfig, data: &Path, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    let train_scenes = load_split(data, Split::Train)?;
    let test_scenes = load_split(data, Split::Test)?;
    if train_scenes.is_empty() {
        bail!("dataset has no training scenes");
    }
    let mut model = Model::new(&cfg.training_model(), tc.seed)?;
    let evaluate = |m: &Model| -> Result<Option<HeldOut>> {
        if test_scenes.is_empty() {
            return Ok(None);
        }
        Ok(Some(held_out_error(m, &test_scenes, cfg.infer.lights_per_view, cfg.infer.num_source_views)?))
    };
    let initial = evaluate(&model)?.unwrap_or(HeldOut {
        depth_mae: f64::NAN,
        normal_deg: f64::NAN,
        pixels: 0,
    });
    let weights = LossWeights {
        depth: tc.depth_weight,
        normal: tc.normal_weight,
        ..LossWeights::default()
    };
    let mut adam = Adam::new(&model.store, tc);
    let mut pairs: Vec<(usize, usize)> = train_scenes
        .iter()
        .enumerate()
        .flat_map(|(s, (_, v))| (0..v.len()).map(move |i| (s, i)))
        .collect();
    let mut records = Vec::with_capacity(tc.epochs);
    let mut best = (f64::INFINITY, model.clone());
    for epoch in 0..tc.epochs {
        let lr = learning_rate(tc, epoch);
        pairs.sort_unstable();
        pairs.shuffle(&mut stream(tc.seed, 1, epoch as u64));
        let mut totals = (0.0f64, [0.0f64; 3], 0.0f64, 0usize);
        for (b, chunk) in pairs.chunks(tc.batch_views).enumerate() {
            let mut acc: Vec<Option<Vec<f32>>> = vec![None; model.store.len()];
            let mut used = 0usize;
            for (k, &(s, i)) in chunk.iter().enumerate() {
                let (name, views) = &train_scenes[s];
                let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
                let sources = select_sources(&cams, i, tc.source_views);
                let mut rng = stream(tc.seed, 2 + epoch as u64, (b * tc.batch_views + k) as u64);
                let Some(sample) = draw_sample(views, i, &sources, tc, &mut rng)? else {
                    log::warn!("epoch {epoch}: no crop of {name} view {i} meets the object; skipped");
                    continue;
                };
                let (grads, bn, parts) = sample_step(&model, &sample, &weights)
                    .with_context(|| format!("epoch {} batch {b}: {name} view {i}", epoch + 1))?;
                if !parts.total.is_finite() {
                    bail!("epoch {} batch {b}: non-finite loss on {name} view {i}", epoch + 1);
                }
                apply_bn_updates(&mut model.store, &bn, model.cfg.bn_momentum);
                for (id, g) in grads {
                    match &mut acc[id.index()] {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                        slot => *slot = Some(g),
                    }
                }
                totals.0 += parts.total as f64;
                for s in 0..3 {
                    totals.1[s] += parts.stage_depth[s] as f64;
                }
                totals.2 += parts.normal as f64;
                totals.3 += 1;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f32;
            let grads: Vec<(ParamId, Vec<f32>)> = model
                .store
                .ids()
                .filter_map(|id| acc[id.index()].take().map(|g| (id, g.into_iter().map(|v| v * scale).collect())))
                .collect();
            adam.update(&mut model.store, &grads, lr);
        }
        let n = totals.3.max(1) as f64;
        let last = epoch + 1 == tc.epochs;
        let validate = last || (tc.validate_every > 0 && (epoch + 1) % tc.validate_every == 0);
        let held_out = if validate { evaluate(&model)? } else { None };
        if let Some(h) = held_out {
            if h.depth_mae < best.0 {
                best = (h.depth_mae, model.clone());
            }
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            loss: totals.0 / n,
            depth_loss: totals.1.map(|v| v / n),
            normal_loss: totals.2 / n,
            samples: totals.3,
            held_out,
        };
        on_epoch(&rec);
        records.push(rec);
    }
    let best = if best.0.is_finite() { best.1 } else { model.clone() };
    Ok(TrainOutcome {
        model,
        best,
        initial,
        records,
    })
}
