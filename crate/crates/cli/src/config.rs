//! Pipeline configuration: one TOML file with a section per stage, any
//! field overridable with `--set section.key=value`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mvps::fusion_eval::{FilterConfig, DEFAULT_THRESHOLD};
use mvps::network::ModelConfig;
use mvps::render::RenderConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Reference views per optimiser step.
    pub batch_views: usize,
    pub lights_per_sample: usize,
    pub source_views: usize,
    /// Side of the square training crop in pixels.
    pub crop: usize,
    pub learning_rate: f64,
    /// Epochs at which the learning rate halves.
    pub lr_decay_steps: Vec<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub depth_weight: f32,
    pub normal_weight: f32,
    /// Held-out evaluation every this many epochs (0 only at the end).
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_views: 1,
            lights_per_sample: 3,
            source_views: 2,
            crop: 32,
            learning_rate: 1e-3,
            lr_decay_steps: vec![8, 12, 30, 40],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            depth_weight: 10.0,
            normal_weight: 1.0,
            validate_every: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub num_source_views: usize,
    pub lights_per_view: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            num_source_views: 4,
            lights_per_view: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold_d: f64,
    pub icp: bool,
    pub crop_z: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold_d: DEFAULT_THRESHOLD,
            icp: true,
            crop_z: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub render: RenderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub fuse: FilterConfig,
    pub eval: EvalConfig,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies one `section.key=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {part} is not a section"))?;
    }
    node.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Reads `path` (defaults when absent), then applies `overrides` in
    /// order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.model.validate()?;
        self.fuse.validate()?;
        let t = &self.train;
        if t.batch_views == 0 || t.lights_per_sample == 0 || t.source_views == 0 {
            bail!("train.batch_views, train.lights_per_sample and train.source_views must be positive");
        }
        if t.crop == 0 || t.crop % 4 != 0 {
            bail!("train.crop must be a positive multiple of 4");
        }
        let (h, w) = self.render.image_size;
        if h % 4 != 0 || w % 4 != 0 {
            bail!("render.image_size must be divisible by 4");
        }
        if t.crop > h.min(w) {
            bail!("train.crop {} exceeds the image size", t.crop);
        }
        if !(t.learning_rate > 0.0 && (0.0..1.0).contains(&t.adam_beta1) && (0.0..1.0).contains(&t.adam_beta2)) {
            bail!("invalid optimiser settings");
        }
        if self.infer.num_source_views == 0 || self.infer.lights_per_view == 0 {
            bail!("infer.num_source_views and infer.lights_per_view must be positive");
        }
        if self.infer.num_source_views >= self.render.num_views || t.source_views >= self.render.num_views {
            bail!("source view counts must be below render.num_views");
        }
        if !(self.eval.threshold_d > 0.0) {
            bail!("eval.threshold_d must be positive");
        }
        Ok(())
    }

    /// Seeds both data generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.render.rng_seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Model settings used for training: sample lights and sources come
    /// from the training section.
    pub fn training_model(&self) -> ModelConfig {
        ModelConfig {
            num_lights_train: self.train.lights_per_sample,
            num_source_views: self.train.source_views,
            ..self.model.clone()
        }
    }
}
