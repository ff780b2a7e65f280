//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mvps::dataset::{generate_dataset, read_scene, with_lights, Manifest, Split};
use mvps::fusion_eval::{crop_z, depth_cloud, evaluate, fuse_views, MetricsReport};
use mvps::io::{read_pfm, read_pgm, read_ply, write_pfm, write_pgm, write_ply, OrientedPointCloud};
use mvps::network::Model;
use mvps::plane_sweep::{predict_view, select_sources, view_features, ViewPrediction};

use crate::config::PipelineConfig;
use crate::train::{train, TrainOutcome};

/// Wall-clock seconds per labelled step.
#[derive(Clone, Debug, Default)]
pub struct Timings {
    pub entries: Vec<(String, f64)>,
}

impl Timings {
    pub fn record(&mut self, label: impl Into<String>, start: Instant) {
        self.entries.push((label.into(), start.elapsed().as_secs_f64()));
    }

    pub fn extend(&mut self, other: Timings) {
        self.entries.extend(other.entries);
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v:.3}");
            s
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`, in
/// which case its previous contents are removed.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = !dir.is_dir() || fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            bail!("{} already exists; pass --force to overwrite", dir.display());
        }
        if occupied {
            match dir.is_dir() {
                true => fs::remove_dir_all(dir)?,
                false => fs::remove_file(dir)?,
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn cmd_gen_data(cfg: &PipelineConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.render.validate()?;
    prepare_dir(out, force)?;
    let manifest = generate_dataset(&cfg.render, out)?;
    log::info!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(manifest)
}

pub const CHECKPOINT: &str = "model.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RUN_MANIFEST: &str = "run_manifest.txt";
pub const TIMINGS: &str = "timings.txt";

/// Trains and writes the final and best checkpoints, the resolved config
/// and an append-only run manifest into `out`.
pub fn cmd_train(cfg: &PipelineConfig, data: &Path, out: &Path, force: bool) -> Result<(TrainOutcome, Timings)> {
    Manifest::read(data)?;
    prepare_dir(out, force)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let manifest_path = out.join(RUN_MANIFEST);
    let mut log = fs::File::create(&manifest_path).with_context(|| format!("creating {}", manifest_path.display()))?;
    writeln!(log, "config_hash={}", cfg.hash())?;
    writeln!(log, "code_version={} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))?;
    let start = Instant::now();
    let mut timings = Timings::default();
    let mut write_err = None;
    let mut epoch_start = Instant::now();
    let outcome = train(cfg, data, |rec| {
        log::info!("{}", rec.line());
        if let Err(e) = writeln!(log, "{}", rec.line()).and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
        timings.record(format!("train.epoch{:03}", rec.epoch), epoch_start);
        epoch_start = Instant::now();
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing run manifest");
    }
    writeln!(
        log,
        "initial heldout_depth_mae={:.6} heldout_normal_deg={:.4}",
        outcome.initial.depth_mae, outcome.initial.normal_deg
    )?;
    outcome.model.save(&out.join(CHECKPOINT))?;
    outcome.best.save(&out.join(BEST_CHECKPOINT))?;
    timings.record("train.total", start);
    Ok((outcome, timings))
}

fn pred_paths(dir: &Path, view: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("depth_{view:03}.pfm")),
        dir.join(format!("normal_{view:03}.pfm")),
        dir.join(format!("mask_{view:03}.pgm")),
    ]
}

pub fn write_prediction(dir: &Path, view: usize, pred: &ViewPrediction) -> Result<()> {
    let [d, n, m] = pred_paths(dir, view);
    write_pfm(&d, &pred.depth)?;
    write_pfm(&n, &pred.normal)?;
    let size = (pred.depth.shape()[0], pred.depth.shape()[1]);
    write_pgm(&m, &pred.mask, size)?;
    Ok(())
}

pub fn read_prediction(dir: &Path, view: usize) -> Result<ViewPrediction> {
    let [d, n, m] = pred_paths(dir, view);
    let (mask, _) = read_pgm(&m)?;
    Ok(ViewPrediction {
        depth: read_pfm(&d)?,
        normal: read_pfm(&n)?,
        mask,
    })
}

/// Scenes for inference: the named ones, or the whole test split.
fn chosen_scenes(data: &Path, scenes: &[String]) -> Result<Vec<String>> {
    let manifest = Manifest::read(data)?;
    if scenes.is_empty() {
        return Ok(manifest.split(Split::Test).into_iter().map(String::from).collect());
    }
    for s in scenes {
        if !manifest.scenes.iter().any(|(n, _)| n == s) {
            bail!("scene {s} is not in {}", data.display());
        }
    }
    Ok(scenes.to_vec())
}

/// Depth, normal and mask maps per requested view, written under
/// `out/<scene>/`.
pub fn cmd_infer(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    scenes: &[String],
    views: Option<&[usize]>,
    force: bool,
) -> Result<Timings> {
    let model = Model::load(checkpoint)?;
    let scenes = chosen_scenes(data, scenes)?;
    prepare_dir(out, force)?;
    let mut timings = Timings::default();
    for scene in &scenes {
        let all = read_scene(data, scene)?;
        let ids: Vec<usize> = views.map(<[usize]>::to_vec).unwrap_or_else(|| (0..all.len()).collect());
        if let Some(&bad) = ids.iter().find(|&&v| v >= all.len()) {
            bail!("view {bad} out of range: {scene} has {} views", all.len());
        }
        let dir = out.join(scene);
        fs::create_dir_all(&dir)?;
        let cams: Vec<_> = all.iter().map(|v| v.camera.clone()).collect();
        let mut cache = vec![None; all.len()];
        for &i in &ids {
            let start = Instant::now();
            let sources = select_sources(&cams, i, cfg.infer.num_source_views);
            for &j in std::iter::once(&i).chain(&sources) {
                if cache[j].is_none() {
                    let v = with_lights(&all[j], cfg.infer.lights_per_view);
                    cache[j] = Some(view_features(&model, &v.images, &v.light_dirs)?);
                }
            }
            let refs: Vec<_> = sources.iter().map(|&j| cache[j].as_ref().expect("cached")).collect();
            let sc: Vec<_> = std::iter::once(i).chain(sources.iter().copied()).map(|j| cams[j].clone()).collect();
            let pred = predict_view(&model, cache[i].as_ref().expect("cached"), &refs, &sc, &all[i].mask)?;
            write_prediction(&dir, i, &pred)?;
            timings.record(format!("infer.{scene}.view{i:03}"), start);
            log::info!("{scene} view {i}: {:.2}s", start.elapsed().as_secs_f64());
        }
    }
    Ok(timings)
}

/// Predicted view indices present in a scene's prediction directory.
fn predicted_views(dir: &Path) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("depth_").and_then(|s| s.strip_suffix(".pfm")) {
            ids.push(id.parse::<usize>().with_context(|| format!("bad prediction file {name}"))?);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Fuses one scene's predictions into a cloud.
pub fn fuse_scene(cfg: &PipelineConfig, pred_dir: &Path, data: &Path, scene: &str) -> Result<OrientedPointCloud> {
    let ids = predicted_views(pred_dir)?;
    if ids.is_empty() {
        bail!("no predictions in {}", pred_dir.display());
    }
    let views = read_scene(data, scene)?;
    if let Some(&bad) = ids.iter().find(|&&v| v >= views.len()) {
        bail!("prediction for view {bad} but {scene} has {} views", views.len());
    }
    let preds = ids.iter().map(|&i| read_prediction(pred_dir, i)).collect::<Result<Vec<_>>>()?;
    let cams: Vec<_> = ids.iter().map(|&i| views[i].camera.clone()).collect();
    let sources: Vec<Vec<usize>> = (0..ids.len())
        .map(|k| select_sources(&cams, k, cfg.infer.num_source_views.min(ids.len() - 1)))
        .collect();
    let (cloud, stats) = fuse_views(&preds, &cams, &sources, &cfg.fuse)?;
    log::info!("{scene}: kept {} of {} masked pixels, dropped {}", stats.kept, stats.masked, stats.masked - stats.kept);
    Ok(cloud)
}

/// One PLY per scene directory found under `pred`.
pub fn cmd_fuse(cfg: &PipelineConfig, pred: &Path, data: &Path, out: &Path, force: bool) -> Result<Timings> {
    cfg.fuse.validate()?;
    let mut scenes: Vec<String> = fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    scenes.sort();
    if scenes.is_empty() {
        bail!("no scene directories in {}", pred.display());
    }
    let clouds = scenes
        .iter()
        .map(|s| {
            let start = Instant::now();
            let c = fuse_scene(cfg, &pred.join(s), data, s)?;
            Ok((s, c, start))
        })
        .collect::<Result<Vec<_>>>()?;
    prepare_dir(out, force)?;
    let mut timings = Timings::default();
    for (scene, cloud, start) in clouds {
        write_ply(&out.join(format!("{scene}.ply")), &cloud)?;
        timings.record(format!("fuse.{scene}"), start);
    }
    Ok(timings)
}

/// Where the reference cloud comes from.
#[derive(Clone, Debug)]
pub enum GroundTruth {
    Ply(PathBuf),
    /// Masked pixels of every view's ground-truth depth.
    Dataset { root: PathBuf, scene: String },
}

pub fn gt_cloud(gt: &GroundTruth) -> Result<OrientedPointCloud> {
    match gt {
        GroundTruth::Ply(p) => Ok(read_ply(p)?),
        GroundTruth::Dataset { root, scene } => {
            let views = read_scene(root, scene)?;
            let depths: Vec<_> = views.iter().map(|v| &v.gt_depth).collect();
            let normals: Vec<_> = views.iter().map(|v| &v.gt_normal).collect();
            let masks: Vec<&[bool]> = views.iter().map(|v| v.mask.as_slice()).collect();
            let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
            Ok(depth_cloud(&depths, &normals, &masks, &cams)?)
        }
    }
}

/// Metrics of `pred` against the ground truth, written as `metrics.txt`
/// and `metrics.json` in `out`.
pub fn cmd_eval(cfg: &PipelineConfig, pred: &Path, gt: &GroundTruth, out: &Path, force: bool) -> Result<MetricsReport> {
    let mut p = read_ply(pred)?;
    let mut g = gt_cloud(gt)?;
    if let Some(z) = cfg.eval.crop_z {
        p = crop_z(&p, z);
        g = crop_z(&g, z);
    }
    if p.is_empty() || g.is_empty() {
        bail!("empty point cloud after loading (pred {}, gt {})", p.len(), g.len());
    }
    let report = evaluate(&p.points, &g.points, cfg.eval.threshold_d, cfg.eval.icp)?;
    prepare_dir(out, force)?;
    fs::write(out.join("metrics.txt"), report.to_text())?;
    fs::write(out.join("metrics.json"), report.to_json())?;
    Ok(report)
}

/// Generates data, trains, then infers, fuses and evaluates every test
/// scene under `out`.
pub fn cmd_all(cfg: &PipelineConfig, out: &Path, force: bool) -> Result<Vec<(String, MetricsReport)>> {
    prepare_dir(out, force)?;
    let start = Instant::now();
    let mut timings = Timings::default();
    let data = out.join("data");
    let t = Instant::now();
    let manifest = cmd_gen_data(cfg, &data, false)?;
    timings.record("gen_data", t);
    let (_, tt) = cmd_train(cfg, &data, &out.join("train"), false)?;
    timings.extend(tt);
    let test: Vec<String> = manifest.split(Split::Test).into_iter().map(String::from).collect();
    if test.is_empty() {
        bail!("configuration has no test scenes to evaluate");
    }
    let ckpt = out.join("train").join(CHECKPOINT);
    timings.extend(cmd_infer(cfg, &ckpt, &data, &out.join("pred"), &test, None, false)?);
    timings.extend(cmd_fuse(cfg, &out.join("pred"), &data, &out.join("fused"), false)?);
    let mut reports = Vec::new();
    let mut summary = String::new();
    for scene in &test {
        let t = Instant::now();
        let gt = GroundTruth::Dataset {
            root: data.clone(),
            scene: scene.clone(),
        };
        let ply = out.join("fused").join(format!("{scene}.ply"));
        let r = cmd_eval(cfg, &ply, &gt, &out.join("eval").join(scene), false)?;
        timings.record(format!("eval.{scene}"), t);
        let _ = writeln!(summary, "{scene} chamfer_l1={} fscore={}", r.chamfer_l1, r.fscore);
        reports.push((scene.clone(), r));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
    let _ = writeln!(summary, "mean chamfer_l1={} fscore={}", mean(|r| r.chamfer_l1), mean(|r| r.fscore));
    fs::write(out.join("metrics.txt"), summary)?;
    timings.record("total", start);
    timings.write(&out.join(TIMINGS))?;
    Ok(reports)
}
