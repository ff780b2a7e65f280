//! Learnable components: the light-informed feature extractor, light
//! aggregation by max pooling, the normal head and the per-stage 3D cost
//! regularisers.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use diffcore::{checkpoint, BatchStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, format_err, IoContext, MvpsError, Result};
use crate::geometry::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Trunk width at full resolution; deeper scales use twice this.
    pub base_channels: usize,
    /// Feature widths at scales 1/4, 1/2 and 1.
    pub scale_channels: (usize, usize, usize),
    pub normal_feature_channels: usize,
    pub normal_hidden_channels: usize,
    pub res_blocks: usize,
    pub reg_channels: usize,
    pub stage_hypothesis_counts: (usize, usize, usize),
    /// Hypothesis interval per stage as a fraction of the depth range.
    pub stage_intervals: (f64, f64, f64),
    pub num_source_views: usize,
    pub num_lights_train: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            scale_channels: (32, 16, 8),
            normal_feature_channels: 16,
            normal_hidden_channels: 16,
            res_blocks: 2,
            reg_channels: 8,
            stage_hypothesis_counts: (48, 16, 8),
            stage_intervals: (1.0, 0.25, 0.0625),
            num_source_views: 2,
            num_lights_train: 3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn counts(&self) -> [usize; 3] {
        let (a, b, c) = self.stage_hypothesis_counts;
        [a, b, c]
    }

    pub fn intervals(&self) -> [f64; 3] {
        let (a, b, c) = self.stage_intervals;
        [a, b, c]
    }

    pub fn scale_widths(&self) -> [usize; 3] {
        let (a, b, c) = self.scale_channels;
        [a, b, c]
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.base_channels,
            self.normal_feature_channels,
            self.normal_hidden_channels,
            self.reg_channels,
        ];
        if widths.iter().chain(self.scale_widths().iter()).any(|&c| c == 0) {
            return Err(config("model channel widths must be positive"));
        }
        // The regulariser halves and restores the hypothesis axis.
        if self.counts().iter().any(|&n| n < 2 || n % 2 != 0) {
            return Err(config("model.stage_hypothesis_counts must be even and at least 2"));
        }
        let [d1, d2, d3] = self.intervals();
        if !(d1 >= d2 && d2 >= d3 && d3 > 0.0) {
            return Err(config("model.stage_intervals must be non-increasing and positive"));
        }
        if self.num_source_views == 0 || self.num_lights_train == 0 {
            return Err(config("model.num_source_views and model.num_lights_train must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(config("model.bn_momentum must lie in [0, 1] and bn_eps be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors: trainable weights plus batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&i| self.is_trainable(i))
            .map(|i| self.get(i).numel())
            .sum()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        checkpoint::write_tensors(w, self.names.iter().map(String::as_str).zip(self.values.iter()))?;
        Ok(())
    }

    /// Replaces every value by the identically named, identically shaped
    /// entry read from `r`.
    pub fn read_into(&mut self, r: &mut impl Read) -> Result<()> {
        let entries = checkpoint::read_tensors(r)?;
        if entries.len() != self.values.len() {
            return Err(format_err(
                "checkpoint",
                format!("{} tensors, model expects {}", entries.len(), self.values.len()),
            ));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(format_err(
                    "checkpoint",
                    format!("entry {i} is {name} {:?}, expected {} {:?}", t.shape(), self.names[i], self.values[i].shape()),
                ));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

/// A forward pass in progress: the tape, lazily bound parameters and the
/// batch statistics seen by training-mode batch norms.
pub struct Ctx<'s> {
    pub tape: Tape<f32>,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    bn_updates: Vec<(ParamId, ParamId, BatchStats<f32>)>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.train && self.store.is_trainable(id) {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after
    /// [`Tape::backward`].
    pub fn gradients(&self) -> Vec<(ParamId, Tensor<f32>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.tape.grad(v)?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }

    /// `(running_mean, running_var, batch statistics)` for each training
    /// batch-norm call.
    pub fn bn_updates(&self) -> &[(ParamId, ParamId, BatchStats<f32>)] {
        &self.bn_updates
    }
}

/// Exponential moving average of batch statistics into running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(ParamId, ParamId, BatchStats<f32>)], momentum: f64) {
    let m = momentum as f32;
    for (mean_id, var_id, stats) in updates {
        for (r, b) in store.get_mut(*mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.get_mut(*var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Conv2,
    Conv3,
    Tconv2,
    Tconv3,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
    kind: Kind,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Fan-in scaled uniform weights (He bound), zero bias.
    fn conv(&mut self, name: &str, kind: Kind, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let spatial = if matches!(kind, Kind::Conv3 | Kind::Tconv3) { 3 } else { 2 };
        let mut shape = match kind {
            Kind::Conv2 | Kind::Conv3 => vec![cout, cin],
            Kind::Tconv2 | Kind::Tconv3 => vec![cin, cout],
        };
        shape.extend(std::iter::repeat_n(k, spatial));
        let fan_in = cin * k.pow(spatial as u32);
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let rng = &mut self.rng;
        let w = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        let w = self.store.add(format!("{name}.weight"), w, true);
        let b = bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]), true));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
            kind,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(vec![c], 1.0), true),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(vec![c]), true),
            mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros(vec![c]), false),
            var: self.store.add(format!("{name}.running_var"), Tensor::full(vec![c], 1.0), false),
        }
    }

    fn cbr(&mut self, name: &str, kind: Kind, cin: usize, cout: usize, stride: usize, relu: bool) -> Cbr {
        Cbr {
            conv: self.conv(&format!("{name}.conv"), kind, cin, cout, 3, stride, false),
            bn: self.bn(&format!("{name}.bn"), cout),
            relu,
        }
    }
}

impl Conv {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        let t = &mut ctx.tape;
        let y = match self.kind {
            Kind::Conv2 => t.conv2d(x, w, b, self.stride, self.pad)?,
            Kind::Conv3 => t.conv3d(x, w, b, self.stride, self.pad)?,
            Kind::Tconv2 => t.conv_transpose2d(x, w, self.stride, self.pad)?,
            Kind::Tconv3 => t.conv_transpose3d(x, w, self.stride, self.pad)?,
        };
        // Transposed convolutions are always followed by batch norm and
        // are built without bias.
        debug_assert!(b.is_none() || matches!(self.kind, Kind::Conv2 | Kind::Conv3));
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl Bn {
    fn forward(&self, ctx: &mut Ctx, x: Var, eps: f32) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b, eps)?;
            ctx.bn_updates.push((self.mean, self.var, stats));
            Ok(y)
        } else {
            let (m, v) = (ctx.store.get(self.mean).data(), ctx.store.get(self.var).data());
            Ok(ctx.tape.batch_norm_eval(x, g, b, m, v, eps)?)
        }
    }
}

/// Convolution, batch norm and optional ReLU.
#[derive(Clone, Debug)]
struct Cbr {
    conv: Conv,
    bn: Bn,
    relu: bool,
}

impl Cbr {
    fn forward(&self, ctx: &mut Ctx, x: Var, eps: f32) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y, eps)?;
        if self.relu {
            Ok(ctx.tape.relu(y)?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Cbr,
    b: Cbr,
}

impl ResBlock {
    fn new(init: &mut Init, name: &str, c: usize) -> Self {
        Self {
            a: init.cbr(&format!("{name}.a"), Kind::Conv2, c, c, 1, true),
            b: init.cbr(&format!("{name}.b"), Kind::Conv2, c, c, 1, false),
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var, eps: f32) -> Result<Var> {
        let y = self.a.forward(ctx, x, eps)?;
        let y = self.b.forward(ctx, y, eps)?;
        let y = ctx.tape.add(y, x)?;
        Ok(ctx.tape.relu(y)?)
    }
}

/// Per-image multi-scale features, each with a leading batch axis.
#[derive(Clone, Copy, Debug)]
pub struct LifeOutput {
    pub nf: Var,
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

impl LifeOutput {
    pub fn maps(&self) -> [Var; 4] {
        [self.nf, self.f1, self.f2, self.f3]
    }
}

/// Light-aggregated maps of one view, without batch axis.
#[derive(Clone, Copy, Debug)]
pub struct Lafm {
    pub nf: Var,
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

impl Lafm {
    pub fn maps(&self) -> [Var; 4] {
        [self.nf, self.f1, self.f2, self.f3]
    }

    /// Cascade features from coarse to fine.
    pub fn scales(&self) -> [Var; 3] {
        [self.f1, self.f2, self.f3]
    }
}

#[derive(Clone, Debug)]
struct Life {
    stem: Cbr,
    res0: Vec<ResBlock>,
    down1: Cbr,
    res1: Vec<ResBlock>,
    down2: Cbr,
    res2: Vec<ResBlock>,
    f1: Conv,
    up2: Cbr,
    f2: Conv,
    up3: Cbr,
    f3: Conv,
    nf: Conv,
}

impl Life {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let b = cfg.base_channels;
        let [c1, c2, c3] = cfg.scale_widths();
        let blocks = |init: &mut Init, name: &str, c: usize| -> Vec<ResBlock> {
            (0..cfg.res_blocks).map(|i| ResBlock::new(init, &format!("{name}.{i}"), c)).collect()
        };
        Self {
            stem: init.cbr("life.stem", Kind::Conv2, 6, b, 1, true),
            res0: blocks(init, "life.res0", b),
            down1: init.cbr("life.down1", Kind::Conv2, b, 2 * b, 2, true),
            res1: blocks(init, "life.res1", 2 * b),
            down2: init.cbr("life.down2", Kind::Conv2, 2 * b, 2 * b, 2, true),
            res2: blocks(init, "life.res2", 2 * b),
            f1: init.conv("life.f1", Kind::Conv2, 2 * b, c1, 3, 1, true),
            up2: init.cbr("life.up2", Kind::Tconv2, c1, c2, 2, true),
            f2: init.conv("life.f2", Kind::Conv2, c2 + 2 * b, c2, 3, 1, true),
            up3: init.cbr("life.up3", Kind::Tconv2, c2, c3, 2, true),
            f3: init.conv("life.f3", Kind::Conv2, c3 + b, c3, 3, 1, true),
            nf: init.conv("life.nf", Kind::Conv2, c3 + b, cfg.normal_feature_channels, 3, 1, true),
        }
    }

    fn forward(&self, ctx: &mut Ctx, input: Var, eps: f32) -> Result<LifeOutput> {
        let mut t0 = self.stem.forward(ctx, input, eps)?;
        for r in &self.res0 {
            t0 = r.forward(ctx, t0, eps)?;
        }
        let mut t1 = self.down1.forward(ctx, t0, eps)?;
        for r in &self.res1 {
            t1 = r.forward(ctx, t1, eps)?;
        }
        let mut t2 = self.down2.forward(ctx, t1, eps)?;
        for r in &self.res2 {
            t2 = r.forward(ctx, t2, eps)?;
        }
        let f1 = self.f1.forward(ctx, t2)?;
        let u2 = self.up2.forward(ctx, f1, eps)?;
        let cat2 = ctx.tape.concat(&[u2, t1], 1)?;
        let f2 = self.f2.forward(ctx, cat2)?;
        let u3 = self.up3.forward(ctx, f2, eps)?;
        let cat3 = ctx.tape.concat(&[u3, t0], 1)?;
        let f3 = self.f3.forward(ctx, cat3)?;
        let nf = self.nf.forward(ctx, cat3)?;
        Ok(LifeOutput { nf, f1, f2, f3 })
    }
}

#[derive(Clone, Debug)]
struct NormalHead {
    convs: [Conv; 3],
}

#[derive(Clone, Debug)]
struct CostReg {
    enc: Cbr,
    down: Cbr,
    mid: Cbr,
    up: Cbr,
    out: Conv,
}

impl CostReg {
    fn new(init: &mut Init, name: &str, cin: usize, r: usize) -> Self {
        Self {
            enc: init.cbr(&format!("{name}.enc"), Kind::Conv3, cin, r, 1, true),
            down: init.cbr(&format!("{name}.down"), Kind::Conv3, r, 2 * r, 2, true),
            mid: init.cbr(&format!("{name}.mid"), Kind::Conv3, 2 * r, 2 * r, 1, true),
            up: init.cbr(&format!("{name}.up"), Kind::Tconv3, 2 * r, r, 2, true),
            out: init.conv(&format!("{name}.out"), Kind::Conv3, r, 1, 3, 1, true),
        }
    }
}

/// The full learnable model.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    life: Life,
    normal: NormalHead,
    reg: [CostReg; 3],
}

/// First line of a checkpoint file.
pub const CHECKPOINT_HEADER: &str = "mvps-checkpoint 1";

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let life = Life::new(&mut init, cfg);
        let (nf, hid) = (cfg.normal_feature_channels, cfg.normal_hidden_channels);
        let normal = NormalHead {
            convs: [
                init.conv("normal.0", Kind::Conv2, nf, hid, 3, 1, true),
                init.conv("normal.1", Kind::Conv2, hid, hid, 3, 1, true),
                init.conv("normal.2", Kind::Conv2, hid, 3, 3, 1, true),
            ],
        };
        let [c1, c2, c3] = cfg.scale_widths();
        let reg = [
            CostReg::new(&mut init, "reg1", c1, cfg.reg_channels),
            CostReg::new(&mut init, "reg2", c2, cfg.reg_channels),
            CostReg::new(&mut init, "reg3", c3, cfg.reg_channels),
        ];
        Ok(Self {
            cfg: cfg.clone(),
            store,
            life,
            normal,
            reg,
        })
    }

    fn eps(&self) -> f32 {
        self.cfg.bn_eps as f32
    }

    /// Runs the extractor on a batch of images with their light directions.
    /// `images` are `[3, H, W]` each, with `H` and `W` divisible by 4.
    pub fn life_forward(&self, ctx: &mut Ctx, images: &[&Tensor<f32>], lights: &[Vec3]) -> Result<LifeOutput> {
        let input = life_input(images, lights)?;
        let x = ctx.tape.constant(input);
        self.life.forward(ctx, x, self.eps())
    }

    /// Unit, camera-facing normals `[3, H, W]` from aggregated `NF [C, H, W]`.
    pub fn normal_regress(&self, ctx: &mut Ctx, nf: Var) -> Result<Var> {
        let s = ctx.tape.shape(nf).to_vec();
        if s.len() != 3 {
            return Err(config(format!("NF must be [C,H,W], got {s:?}")));
        }
        let mut x = ctx.tape.reshape(nf, vec![1, s[0], s[1], s[2]])?;
        for (i, conv) in self.normal.convs.iter().enumerate() {
            x = conv.forward(ctx, x)?;
            if i < 2 {
                x = ctx.tape.relu(x)?;
            }
        }
        let n = ctx.tape.unit_normals(x, true)?;
        Ok(ctx.tape.reshape(n, vec![3, s[1], s[2]])?)
    }

    /// Hypothesis logits `[Ns, H, W]` from an aggregated volume
    /// `[C, Ns, H, W]` for stage 1, 2 or 3.
    pub fn cost_logits(&self, ctx: &mut Ctx, vol: Var, stage: usize) -> Result<Var> {
        if !(1..=3).contains(&stage) {
            return Err(config(format!("stage must be 1, 2 or 3, got {stage}")));
        }
        let reg = &self.reg[stage - 1];
        let s = ctx.tape.shape(vol).to_vec();
        if s.len() != 4 || s[1..].iter().any(|d| d % 2 != 0) {
            return Err(config(format!("cost volume must be [C,Ns,H,W] with even Ns, H, W; got {s:?}")));
        }
        let eps = self.eps();
        let x = ctx.tape.reshape(vol, vec![1, s[0], s[1], s[2], s[3]])?;
        let a = reg.enc.forward(ctx, x, eps)?;
        let b = reg.down.forward(ctx, a, eps)?;
        let b = reg.mid.forward(ctx, b, eps)?;
        let u = reg.up.forward(ctx, b, eps)?;
        let u = ctx.tape.add(u, a)?;
        let o = reg.out.forward(ctx, u)?;
        Ok(ctx.tape.reshape(o, vec![s[1], s[2], s[3]])?)
    }

    /// Probability volume: softmax of [`Model::cost_logits`] over hypotheses.
    pub fn cost_regularize(&self, ctx: &mut Ctx, vol: Var, stage: usize) -> Result<Var> {
        let l = self.cost_logits(ctx, vol, stage)?;
        Ok(ctx.tape.softmax(l, 0)?)
    }

    /// Config as `key=value` lines (values in JSON), a blank line, then the
    /// tensor container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{CHECKPOINT_HEADER}").at(path)?;
        let value = serde_json::to_value(&self.cfg).map_err(|e| format_err("model config", e.to_string()))?;
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                writeln!(buf, "{k}={v}").at(path)?;
            }
        }
        writeln!(buf).at(path)?;
        self.store.write(&mut buf)?;
        std::fs::write(path, buf).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        let mut r = bytes.as_slice();
        let mut line = String::new();
        r.read_line(&mut line).at(path)?;
        if line.trim_end() != CHECKPOINT_HEADER {
            return Err(format_err("checkpoint", format!("{}: missing header", path.display())));
        }
        let mut map = serde_json::Map::new();
        loop {
            line.clear();
            if r.read_line(&mut line).at(path)? == 0 {
                return Err(format_err("checkpoint", "unterminated header"));
            }
            let l = line.trim_end_matches('\n');
            if l.is_empty() {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| format_err("checkpoint", format!("bad header line {l:?}")))?;
            let v = serde_json::from_str(v).map_err(|e| format_err("checkpoint", format!("{k}: {e}")))?;
            map.insert(k.to_string(), v);
        }
        let cfg: ModelConfig =
            serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| format_err("checkpoint", e.to_string()))?;
        let mut model = Model::new(&cfg, 0)?;
        model.store.read_into(&mut r)?;
        Ok(model)
    }
}

/// `[N, 6, H, W]`: each image stacked with its light direction repeated at
/// every pixel.
pub fn life_input(images: &[&Tensor<f32>], lights: &[Vec3]) -> Result<Tensor<f32>> {
    if images.is_empty() || images.len() != lights.len() {
        return Err(config(format!("{} images with {} lights", images.len(), lights.len())));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(config(format!("images must be [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(config(format!("image size {h}x{w} is not divisible by 4")));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(images.len() * 6 * plane);
    for (img, l) in images.iter().zip(lights) {
        if img.shape() != shape.as_slice() {
            return Err(config("images in one batch differ in size"));
        }
        if (l.norm() - 1.0).abs() > 1e-5 {
            return Err(config(format!("light direction {l:?} is not unit length")));
        }
        data.extend_from_slice(img.data());
        for c in 0..3 {
            data.extend(std::iter::repeat_n(l[c] as f32, plane));
        }
    }
    Ok(Tensor::new(vec![images.len(), 6, h, w], data)?)
}

/// Elementwise max over per-light features `[NF, F1, F2, F3]`, each
/// `[C, H, W]`.
pub fn lafm_aggregate(tape: &mut Tape<f32>, per_light: &[[Var; 4]]) -> Result<Lafm> {
    if per_light.is_empty() {
        return Err(MvpsError::Empty("light list"));
    }
    let mut out = [per_light[0][0]; 4];
    for (s, slot) in out.iter_mut().enumerate() {
        let xs: Vec<Var> = per_light.iter().map(|f| f[s]).collect();
        *slot = tape.elementwise_max(&xs)?;
    }
    Ok(Lafm {
        nf: out[0],
        f1: out[1],
        f2: out[2],
        f3: out[3],
    })
}

/// Splits a batched [`LifeOutput`] into per-image maps for the batch rows
/// in `rows`.
pub fn split_batch(tape: &mut Tape<f32>, out: &LifeOutput, rows: &[usize]) -> Result<Vec<[Var; 4]>> {
    rows.iter()
        .map(|&i| {
            let mut maps = [out.nf; 4];
            for (slot, m) in maps.iter_mut().zip(out.maps()) {
                *slot = tape.select(m, i)?;
            }
            Ok(maps)
        })
        .collect()
}
