//! Criteria that train or run the whole pipeline: 7, 8 and 10.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mvps::render::{random_scene, stream, streams, Texture};
use mvps_cli::config::PipelineConfig;
use mvps_cli::pipeline::{cmd_gen_data, TIMINGS};
use mvps_cli::train::{train, HeldOut};
use tempfile::TempDir;

use crate::{Outcome, Shared};

pub const C7_BUDGET: f64 = 1800.0;

/// The default dataset and the 3-light training run on it.
pub struct Training {
    _dir: TempDir,
    data: PathBuf,
    cfg: PipelineConfig,
    initial: HeldOut,
    last: HeldOut,
}

fn run_training(cfg: &PipelineConfig, data: &Path, label: &str) -> Result<(HeldOut, HeldOut)> {
    let outcome = train(cfg, data, |r| println!("    [{label}] {}", r.line()))?;
    let last = outcome
        .records
        .last()
        .and_then(|r| r.held_out)
        .context("training produced no final held-out evaluation")?;
    Ok((outcome.initial, last))
}

fn three_light(shared: &mut Shared) -> Result<&Training> {
    if shared.training.is_none() {
        let dir = tempfile::tempdir()?;
        let data = dir.path().join("data");
        let cfg = PipelineConfig::default();
        cmd_gen_data(&cfg, &data, false)?;
        let (initial, last) = run_training(&cfg, &data, "3 lights")?;
        shared.training = Some(Training {
            _dir: dir,
            data,
            cfg,
            initial,
            last,
        });
    }
    Ok(shared.training.as_ref().expect("just filled"))
}

pub fn toy_training(shared: &mut Shared) -> Result<Outcome> {
    let t = three_light(shared)?;
    let (r, tc) = (&t.cfg.render, &t.cfg.train);
    let setup = r.train_scenes == 8 && r.image_size == (64, 64) && tc.lights_per_sample == 3 && tc.epochs == 20;
    let ratio = t.last.depth_mae / t.initial.depth_mae;
    Ok(Outcome::from_checks(&[
        (
            format!("{} train scenes, {}x{}, {} lights/sample, {} epochs", r.train_scenes, r.image_size.0, r.image_size.1, tc.lights_per_sample, tc.epochs),
            setup,
        ),
        (
            format!("held-out depth MAE {:.4} -> {:.4} (x{ratio:.3})", t.initial.depth_mae, t.last.depth_mae),
            ratio <= 0.5,
        ),
        (format!("held-out normal error {:.2} deg", t.last.normal_deg), t.last.normal_deg < 25.0),
    ]))
}

pub fn multi_light(shared: &mut Shared) -> Result<Outcome> {
    let t = three_light(shared)?;
    let mut cfg = t.cfg.clone();
    cfg.train.lights_per_sample = 1;
    let (_, one) = run_training(&cfg, &t.data, "1 light")?;
    let r = &t.cfg.render;
    let textureless = (r.train_scenes..r.train_scenes + r.test_scenes).all(|k| {
        random_scene(&mut stream(r.rng_seed, streams::SCENE, k as u64, 0))
            .primitives
            .iter()
            .any(|p| matches!(p.material.albedo, Texture::Constant(_)))
    });
    Ok(Outcome::from_checks(&[
        (
            format!("held-out depth MAE 3 lights {:.4} vs 1 light {:.4}", t.last.depth_mae, one.depth_mae),
            t.last.depth_mae < one.depth_mae,
        ),
        ("every test scene has a constant-albedo primitive".into(), textureless),
    ]))
}

/// Relative path to contents for every file under `root`.
fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root)?.to_path_buf(), fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn run_all(out: &Path) -> Result<f64> {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_mvps"))
        .args(["--threads", "1", "--seed", "7", "all", "--out"])
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()?;
    if !status.success() {
        bail!("mvps all exited with {status}");
    }
    Ok(start.elapsed().as_secs_f64())
}

pub fn reproducibility(shared: &mut Shared) -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let secs = [run_all(&a)?, run_all(&b)?];
    // Wall-clock timings are the one output expected to differ.
    let strip = |mut t: BTreeMap<PathBuf, Vec<u8>>| {
        t.remove(Path::new(TIMINGS));
        t
    };
    let (ta, tb) = (strip(tree(&a)?), strip(tree(&b)?));
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let mut by_ext: BTreeMap<String, usize> = BTreeMap::new();
    for k in ta.keys() {
        *by_ext.entry(k.extension().map_or("other".into(), |e| e.to_string_lossy().into_owned())).or_default() += 1;
    }
    let kinds = by_ext.iter().map(|(e, n)| format!("{n} {e}")).collect::<Vec<_>>().join(", ");
    let limit = 2.0 * shared.c7_seconds.unwrap_or(C7_BUDGET);
    Ok(Outcome::from_checks(&[
        (format!("{} files byte-identical ({kinds})", ta.len()), differing.is_empty() && !ta.is_empty()),
        (format!("runs took {:.0} s and {:.0} s, limit {limit:.0} s each", secs[0], secs[1]), secs.iter().all(|&s| s <= limit)),
    ])
    .with_note(&differing))
}

impl Outcome {
    fn with_note(mut self, differing: &[String]) -> Self {
        if !differing.is_empty() {
            self.detail += &format!("; differing: {}", differing.join(", "));
        }
        self
    }
}
