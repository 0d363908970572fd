//! Multi-view diffusion objective, optimizer, training loop, checkpoints and sampling.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::camera::{uniform_azimuths, CameraPose};
use crate::data::{DataMix, IdentityRecord};
use crate::diffusion::{build_schedule, ddim_step, ddim_timesteps, default_beta_range, forward_diffuse, MultiViewState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imageio::images_to_tensor;
use crate::model::{estimate_occupancy, Condition, EpsPredictor, Gen3dModel, ModelConfig};
use crate::nn::{ParamGroup, ParamStore};
use crate::rng::{RngState, SeededRng};

const STREAM_INIT: u64 = 0x1417;
const STREAM_TRAIN: u64 = 0x7a11;

/// Every knob of a training run. Serialized flat, one key per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub timesteps: usize,
    pub views: usize,
    pub subset: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    pub lr_backbone_start: f64,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub data_mix: DataMix,
    pub prune: bool,
    pub mesh_provider: String,
    pub ddim_steps: usize,
    pub eta: f64,
    /// `f32` or `f64`.
    pub dtype: String,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small run that fits in minutes on one CPU.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            timesteps: 100,
            views: 8,
            subset: 4,
            batch_size: 1,
            steps: 2000,
            warmup: 100,
            lr_backbone_start: 1e-6,
            lr_backbone: 5e-5,
            lr_other: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            checkpoint_every: 500,
            data_mix: DataMix::Both,
            prune: true,
            mesh_provider: "toy-parametric".into(),
            ddim_steps: 50,
            eta: 0.0,
            dtype: "f32".into(),
            model: ModelConfig::desk(),
        }
    }

    /// Full-size settings; not meant to run at desk scale.
    pub fn full() -> Self {
        Self {
            timesteps: 1000,
            views: 16,
            batch_size: 32,
            steps: 90_000,
            checkpoint_every: 5000,
            model: ModelConfig { image_size: 256, grid_size: 32, frustum_size: 64, base_channels: 128, ..ModelConfig::desk() },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subset == 0 || self.subset > self.views {
            return bad(format!("need 1 <= subset <= views, got {} of {}", self.subset, self.views));
        }
        if self.timesteps < 2 || self.batch_size == 0 {
            return bad("timesteps >= 2 and batch_size >= 1 required".into());
        }
        if !(self.lr_backbone_start > 0.0 && self.lr_backbone > 0.0 && self.lr_other > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.timesteps || !(0.0..=1.0).contains(&self.eta) {
            return bad("need 1 <= ddim_steps <= timesteps and eta in [0, 1]".into());
        }
        self.dtype()?;
        self.model.validate()
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("dtype must be f32 or f64, got `{other}`"))),
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule { warmup: self.warmup, backbone_start: self.lr_backbone_start, backbone: self.lr_backbone, other: self.lr_other }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let (lo, hi) = default_beta_range(self.timesteps);
        build_schedule(self.timesteps, lo, hi)
    }

    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }

    /// Applies `key = value` overrides; unknown keys are rejected.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut map = self.to_map();
        for (key, raw) in pairs {
            let slot = map.get_mut(key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            *slot = match slot {
                Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
                _ => serde_json::from_str(raw).map_err(|e| Error::Config(format!("`{key}`: cannot parse `{raw}`: {e}")))?,
            };
        }
        let cfg: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses flat `key = value` text over the desk defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::desk().with_overrides(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form: every key, sorted, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Learning-rate plan: linear warm-up for the backbone, constant elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup: usize,
    pub backbone_start: f64,
    pub backbone: f64,
    pub other: f64,
}

impl LrSchedule {
    pub fn standard() -> Self {
        Self { warmup: 100, backbone_start: 1e-6, backbone: 5e-5, other: 5e-4 }
    }
}

pub fn lr_at(step: usize, group: ParamGroup, s: &LrSchedule) -> f64 {
    match group {
        ParamGroup::Other => s.other,
        ParamGroup::Backbone if step >= s.warmup => s.backbone,
        ParamGroup::Backbone => s.backbone_start + (s.backbone - s.backbone_start) * step as f64 / s.warmup as f64,
    }
}

/// `k` distinct indices drawn uniformly without replacement from `0..n`.
pub fn sample_view_subset(n: usize, k: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= k <= N, got k={k}, N={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    Ok(idx)
}

/// One identity ready for training: input, target views and geometry.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: u32,
    pub cond: Condition,
    /// `(N, C, s, s)` clean targets in the diffusion representation.
    pub targets: Tensor,
    pub poses: Vec<CameraPose>,
    pub azimuths: Vec<f64>,
}

/// Input is the frontal view; targets are the views nearest `N` uniform
/// azimuths, each used at most once and posed at its own azimuth.
pub fn build_examples(records: &[IdentityRecord], cfg: &TrainConfig) -> Result<Vec<TrainExample>> {
    let dtype = cfg.dtype()?;
    let m = &cfg.model;
    let providers = m.mesh_providers();
    let mut out = Vec::new();
    for r in records.iter().filter(|r| cfg.data_mix.admits(r.domain)) {
        let front = r.view_at(0.0).ok_or_else(|| Error::invalid(format!("identity {} has no frontal view", r.id)))?;
        if r.views.len() < cfg.views {
            return Err(Error::invalid(format!("identity {} has {} views, need {}", r.id, r.views.len(), cfg.views)));
        }
        let mut used = vec![false; r.views.len()];
        let mut picked = Vec::with_capacity(cfg.views);
        for want in uniform_azimuths(cfg.views) {
            let dist = |a: f64| {
                let d = (a - want).rem_euclid(360.0);
                d.min(360.0 - d)
            };
            let best = (0..r.views.len())
                .filter(|&i| !used[i])
                .min_by(|&a, &b| dist(r.views[a].azimuth).total_cmp(&dist(r.views[b].azimuth)))
                .expect("enough views");
            used[best] = true;
            picked.push(&r.views[best]);
        }
        let occ = estimate_occupancy(&front.image, m, &cfg.mesh_provider, &providers)?;
        let cond = Condition::from_parts(&front.image, 0.0, &occ, m, dtype)?;
        let imgs: Vec<_> = picked.iter().map(|v| &v.image).collect();
        let targets = m.latent.encode(&images_to_tensor(&imgs, m.image_size, dtype)?)?;
        let azimuths: Vec<f64> = picked.iter().map(|v| v.azimuth).collect();
        let poses = azimuths.iter().map(|&a| m.pose(a)).collect::<Result<_>>()?;
        out.push(TrainExample { id: r.id, cond, targets, poses, azimuths });
    }
    Ok(out)
}

/// The random choices behind one loss term.
#[derive(Debug, Clone)]
pub struct LossDraw {
    pub views: Vec<usize>,
    pub t: usize,
    pub eps: Tensor,
}

impl LossDraw {
    pub fn sample(ex: &TrainExample, k: usize, sched: &NoiseSchedule, rng: &mut SeededRng) -> Result<Self> {
        let (n, c, h, w) = ex.targets.dims4()?;
        let views = sample_view_subset(n, k, rng)?;
        let t = 1 + rng.below(sched.steps());
        let eps = rng.normal_tensor(&[k, c, h, w], ex.targets.dtype())?;
        Ok(Self { views, t, eps })
    }
}

/// Mean over views of the per-view L2 norm of `eps - eps_hat`.
pub fn view_l2_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_hat.dims() {
        return Err(Error::shape(eps.dims(), eps_hat.dims()));
    }
    let k = eps.dims()[0];
    let d = (eps - eps_hat)?.reshape((k, ()))?;
    Ok(d.sqr()?.sum(1)?.sqrt()?.mean_all()?)
}

pub fn loss_for_draw(ex: &TrainExample, draw: &LossDraw, model: &dyn EpsPredictor, sched: &NoiseSchedule) -> Result<Tensor> {
    let idx = Tensor::from_vec(draw.views.iter().map(|&v| v as u32).collect::<Vec<_>>(), draw.views.len(), &Device::Cpu)?;
    let poses: Vec<CameraPose> = draw.views.iter().map(|&v| ex.poses[v]).collect();
    let x0 = MultiViewState::new(ex.targets.index_select(&idx, 0)?, 0, poses)?;
    let x_t = forward_diffuse(&x0, draw.t, &draw.eps, sched)?;
    let eps_hat = model.predict(&x_t.views, draw.t, &draw.views, &x_t.poses, &ex.cond)?;
    view_l2_loss(&draw.eps, &eps_hat)
}

/// Batch mean of the multi-view loss, drawing subsets, timesteps and noise from `rng`.
pub fn loss(batch: &[&TrainExample], model: &dyn EpsPredictor, sched: &NoiseSchedule, k: usize, rng: &mut SeededRng) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let draw = LossDraw::sample(ex, k, sched, rng)?;
        terms.push(loss_for_draw(ex, &draw, model, sched)?);
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// Adam with decoupled weight decay and one learning rate per parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter that has a gradient, scaling all
    /// gradients by `grad_scale` first.
    pub fn update(&mut self, store: &ParamStore, grads: &GradStore, grad_scale: f64, lr: impl Fn(&str) -> f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach().affine(grad_scale, 0.0)?;
            let m = match self.m.get(name) {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let rate = lr(name);
            let adam = (m.affine(1.0 / bc1, 0.0)? / (v.affine(1.0 / bc2, 0.0)?.sqrt()? + self.eps)?)?;
            let p = var.as_tensor().detach();
            let next = (p.affine(1.0 - rate * self.weight_decay, 0.0)? - adam.affine(rate, 0.0)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for (_, var) in store.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

const MAGIC: &[u8; 8] = b"G3DCKPT1";

/// Training state at a step boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub rng: RngState,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer_step: usize,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: usize,
    config_hash: String,
    config: TrainConfig,
    schedule: NoiseSchedule,
    rng: RngState,
    optimizer_step: usize,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        _ => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
    };
    Ok(t)
}

impl Checkpoint {
    /// Layout: 8-byte magic, little-endian `u64` header length, JSON header,
    /// then the raw little-endian arrays at the offsets the header lists.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let groups = [("param/", &self.params), ("adam_m/", &self.adam_m), ("adam_v/", &self.adam_v)];
        for (prefix, map) in groups {
            for (name, t) in map {
                let bytes = tensor_bytes(t)?;
                tensors.push(TensorEntry { name: format!("{prefix}{name}"), shape: t.dims().to_vec(), offset: blob.len(), bytes: bytes.len() });
                blob.extend(bytes);
            }
        }
        let header = Header {
            format_version: 1,
            step: self.step,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            rng: self.rng.clone(),
            optimizer_step: self.optimizer_step,
            dtype: self.config.dtype.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.config_hash != header.config.hash() {
            return Err(bad("config hash does not match the stored config"));
        }
        let dtype = header.config.dtype()?;
        let blob = &bytes[16 + len..];
        let mut ck = Checkpoint {
            step: header.step,
            config: header.config,
            schedule: header.schedule,
            rng: header.rng,
            params: BTreeMap::new(),
            optimizer_step: header.optimizer_step,
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
        };
        for e in header.tensors {
            let data = blob.get(e.offset..e.offset + e.bytes).ok_or_else(|| bad("truncated tensor data"))?;
            let t = tensor_from_bytes(data, &e.shape, dtype)?;
            let (map, name) = if let Some(n) = e.name.strip_prefix("param/") {
                (&mut ck.params, n)
            } else if let Some(n) = e.name.strip_prefix("adam_m/") {
                (&mut ck.adam_m, n)
            } else if let Some(n) = e.name.strip_prefix("adam_v/") {
                (&mut ck.adam_v, n)
            } else {
                return Err(bad(&format!("unknown tensor `{}`", e.name)));
            };
            map.insert(name.to_string(), t);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn model(&self) -> Result<Gen3dModel> {
        let model = Gen3dModel::new(&self.config.model, 0, self.config.dtype()?)?;
        model.store.load(&self.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Receives `train_log.csv` and `ckpt_<step>.bin` files.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop early after this many total steps.
    pub stop_at: Option<usize>,
    /// Print a progress line every this many steps; 0 is silent.
    pub progress_every: usize,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of each step run in this call.
    pub losses: Vec<f64>,
}

pub const TRAIN_LOG: &str = "train_log.csv";

pub fn checkpoint_file_name(step: usize) -> String {
    format!("ckpt_{step:06}.bin")
}

/// Runs the optimizer from scratch or from `opts.resume`.
pub fn fit(cfg: &TrainConfig, examples: &[TrainExample], opts: &FitOptions) -> Result<FitOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("training needs a nonempty dataset"));
    }
    let dtype = cfg.dtype()?;
    let sched = cfg.schedule()?;
    let model = Gen3dModel::new(&cfg.model, SeededRng::derive(cfg.seed, STREAM_INIT).next_u64(), dtype)?;
    let mut rng = SeededRng::derive(cfg.seed, STREAM_TRAIN);
    let mut opt = AdamW::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
    let mut start = 0;
    if let Some(ck) = &opts.resume {
        if ck.config.hash() != cfg.hash() {
            return Err(Error::Checkpoint("checkpoint was written under a different config".into()));
        }
        model.store.load(&ck.params)?;
        rng = SeededRng::from_state(&ck.rng)?;
        opt.step = ck.optimizer_step;
        opt.m = ck.adam_m.clone();
        opt.v = ck.adam_v.clone();
        start = ck.step;
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(TRAIN_LOG);
            let fresh = start == 0 || !path.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
            if fresh {
                writeln!(f, "step,loss,lr_backbone,lr_other,wall_seconds")?;
            }
            Some(f)
        }
        None => None,
    };
    let lrs = cfg.lr_schedule();
    let end = opts.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    let clock = Instant::now();
    let mut losses = Vec::new();
    let snapshot = |step: usize, rng: &SeededRng, opt: &AdamW| -> Result<Checkpoint> {
        Ok(Checkpoint {
            step,
            config: cfg.clone(),
            schedule: sched.clone(),
            rng: rng.state(),
            params: model.store.snapshot()?,
            optimizer_step: opt.step,
            adam_m: opt.m.clone(),
            adam_v: opt.v.clone(),
        })
    };
    for step in start..end {
        let batch: Vec<&TrainExample> = (0..cfg.batch_size).map(|_| &examples[rng.below(examples.len())]).collect();
        let l = loss(&batch, &model, &sched, cfg.subset, &mut rng)?;
        let value = l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = l.backward()?;
        let scale = if cfg.grad_clip > 0.0 {
            let norm = grad_norm(&model.store, &grads)?;
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 }
        } else {
            1.0
        };
        let (lb, lo) = (lr_at(step, ParamGroup::Backbone, &lrs), lr_at(step, ParamGroup::Other, &lrs));
        opt.update(&model.store, &grads, scale, |name| match ParamGroup::of(name) {
            ParamGroup::Backbone => lb,
            ParamGroup::Other => lo,
        })?;
        losses.push(value);
        if let Some(f) = log.as_mut() {
            writeln!(f, "{step},{value},{lb},{lo},{:.3}", clock.elapsed().as_secs_f64())?;
        }
        if opts.progress_every > 0 && (step + 1) % opts.progress_every == 0 {
            eprintln!("step {:>6}  loss {value:.5}  {:.1}s", step + 1, clock.elapsed().as_secs_f64());
        }
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                snapshot(step + 1, &rng, &opt)?.save(&dir.join(checkpoint_file_name(step + 1)))?;
            }
        }
    }
    let checkpoint = snapshot(end.max(start), &rng, &opt)?;
    Ok(FitOutcome { checkpoint, losses })
}

/// Joint DDIM over all target views at once, returning decoded images
/// `(N, 3, S, S)` clipped to `[-1, 1]`.
pub fn sample_views(
    model: &dyn EpsPredictor,
    cond: &Condition,
    cfg: &ModelConfig,
    poses: &[CameraPose],
    sched: &NoiseSchedule,
    steps: usize,
    eta: f64,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let (_, c, h, w) = cond.y.dims4()?;
    let n = poses.len();
    if n == 0 {
        return Err(Error::invalid("no target poses"));
    }
    let views: Vec<usize> = (0..n).collect();
    let x = rng.normal_tensor(&[n, c, h, w], cond.y.dtype())?;
    let mut state = MultiViewState::new(x, sched.steps(), poses.to_vec())?;
    let ts = ddim_timesteps(sched.steps(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        state.t = t;
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict(&state.views, t, &views, poses, cond)?.detach();
        state = ddim_step(&state, &eps, t_prev, eta, sched, rng)?;
    }
    Ok(cfg.latent.decode(&state.views)?.clamp(-1.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, DataMix};
    use crate::model::{PlantedOracle, ZeroPredictor};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            views: 4,
            subset: 2,
            steps: 6,
            warmup: 4,
            checkpoint_every: 3,
            dtype: "f64".into(),
            model: crate::model::tests::tiny(),
            ..TrainConfig::desk()
        }
    }

    fn examples(cfg: &TrainConfig, n: usize) -> Vec<TrainExample> {
        build_examples(&generate_corpus(n, 3, DataMix::Both, 16).unwrap(), cfg).unwrap()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let s = LrSchedule::standard();
        assert_eq!(lr_at(0, ParamGroup::Backbone, &s), 1e-6);
        assert_eq!(lr_at(100, ParamGroup::Backbone, &s), 5e-5);
        assert_eq!(lr_at(5000, ParamGroup::Backbone, &s), 5e-5);
        assert!((lr_at(50, ParamGroup::Backbone, &s) - (1e-6 + 49e-6 / 2.0)).abs() < 1e-18);
        assert_eq!(lr_at(0, ParamGroup::Other, &s), 5e-4);
        let flat = LrSchedule { warmup: 0, ..s };
        assert_eq!(lr_at(0, ParamGroup::Backbone, &flat), 5e-5);
    }

    #[test]
    fn subsets_are_distinct_and_in_range() {
        let mut rng = SeededRng::new(0);
        for _ in 0..200 {
            let s = sample_view_subset(16, 4, &mut rng).unwrap();
            let mut d = s.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 4);
            assert!(s.iter().all(|&i| i < 16));
        }
        let mut all = sample_view_subset(5, 5, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(sample_view_subset(3, 4, &mut rng).is_err());
        assert!(sample_view_subset(3, 0, &mut rng).is_err());
    }

    #[test]
    fn config_text_round_trip_and_overrides() {
        let cfg = TrainConfig::desk();
        let text = cfg.to_text();
        assert!(text.contains("lr_other = 0.0005\n"));
        assert!(text.contains("aggregation = concat\n"));
        assert_eq!(TrainConfig::parse(&text).unwrap(), cfg);
        let c = TrainConfig::parse("# comment\nviews = 16\nattention = per-view\nmesh_provider = constant-sphere\n").unwrap();
        assert_eq!(c.views, 16);
        assert_eq!(c.model.attention, crate::denoiser::AttentionMode::PerView);
        assert_ne!(c.hash(), cfg.hash());
        assert!(matches!(TrainConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("subset = 9"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("views"), Err(Error::Config(_))));
    }

    #[test]
    fn examples_pick_uniform_targets_around_the_frontal_input() {
        let cfg = tiny_config();
        let ex = examples(&cfg, 2);
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].azimuths, vec![-180.0, -90.0, 0.0, 90.0]);
        assert_eq!(ex[0].targets.dims(), [4, 3, 8, 8]);
        let only_real = TrainConfig { data_mix: DataMix::RealProxy, ..cfg.clone() };
        assert_eq!(build_examples(&generate_corpus(2, 3, DataMix::Both, 16).unwrap(), &only_real).unwrap().len(), 1);
    }

    #[test]
    fn perfect_and_zero_predictor_losses() {
        let cfg = tiny_config();
        let ex = &examples(&cfg, 1)[0];
        let sched = cfg.schedule().unwrap();
        let oracle = PlantedOracle { x0: ex.targets.clone(), schedule: sched.clone() };
        let mut rng = SeededRng::new(5);
        for _ in 0..5 {
            let draw = LossDraw::sample(ex, 2, &sched, &mut rng).unwrap();
            let l = loss_for_draw(ex, &draw, &oracle, &sched).unwrap().to_scalar::<f64>().unwrap();
            assert!(l.abs() <= 1e-10, "{l}");
        }
        let draw = LossDraw::sample(ex, 2, &sched, &mut rng).unwrap();
        let l = loss_for_draw(ex, &draw, &ZeroPredictor, &sched).unwrap().to_scalar::<f64>().unwrap();
        let norms: Vec<f64> = (0..2)
            .map(|v| draw.eps.get(v).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt())
            .collect();
        assert!((l - (norms[0] + norms[1]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_view_loss_is_the_plain_epsilon_norm() {
        let mut rng = SeededRng::new(1);
        let eps = rng.normal_tensor(&[1, 3, 4, 4], DType::F64).unwrap();
        let hat = rng.normal_tensor(&[1, 3, 4, 4], DType::F64).unwrap();
        let l = view_l2_loss(&eps, &hat).unwrap().to_scalar::<f64>().unwrap();
        let want = (&eps - &hat).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_resume_are_bit_exact() {
        let cfg = tiny_config();
        let ex = examples(&cfg, 2);
        let dir = tempfile::tempdir().unwrap();
        let full = fit(&cfg, &ex, &FitOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
        assert_eq!(full.losses.len(), 6);
        let mid = Checkpoint::load(&dir.path().join(checkpoint_file_name(3))).unwrap();
        assert_eq!(mid.step, 3);
        let bytes = mid.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
        let resumed = fit(&cfg, &ex, &FitOptions { resume: Some(mid), ..Default::default() }).unwrap();
        assert_eq!(resumed.losses, full.losses[3..].to_vec());
        assert_eq!(resumed.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
        let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 7);

        let other = fit(&TrainConfig { seed: 1, ..cfg.clone() }, &ex, &FitOptions::default()).unwrap();
        assert_ne!(other.losses, full.losses);
        assert!(fit(&cfg, &[], &FitOptions::default()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn one_step_moves_groups_by_their_learning_rates() {
        let cfg = TrainConfig { steps: 1, grad_clip: 0.0, weight_decay: 0.0, ..tiny_config() };
        let ex = examples(&cfg, 1);
        let init = Gen3dModel::new(&cfg.model, SeededRng::derive(cfg.seed, STREAM_INIT).next_u64(), DType::F64).unwrap();
        let before = init.store.snapshot().unwrap();
        let after = fit(&cfg, &ex, &FitOptions::default()).unwrap().checkpoint.params;
        // The first Adam step moves every coordinate with a nonzero gradient by ~lr.
        let max_delta = |group: ParamGroup| {
            before
                .iter()
                .filter(|(n, _)| ParamGroup::of(n) == group)
                .map(|(n, t)| (t - &after[n]).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap())
                .fold(0.0, f64::max)
        };
        let (b, o) = (max_delta(ParamGroup::Backbone), max_delta(ParamGroup::Other));
        assert!((b - 1e-6).abs() < 1e-8, "{b}");
        assert!((o - 5e-4).abs() < 5e-6, "{o}");
    }

    #[test]
    fn oracle_sampling_recovers_planted_views() {
        let cfg = tiny_config();
        let ex = &examples(&cfg, 1)[0];
        let sched = cfg.schedule().unwrap();
        let oracle = PlantedOracle { x0: ex.targets.clone(), schedule: sched.clone() };
        let out = sample_views(&oracle, &ex.cond, &cfg.model, &ex.poses, &sched, 50, 0.0, &mut SeededRng::new(9)).unwrap();
        assert_eq!(out.dims(), ex.targets.dims());
        let err = (&out - &ex.targets).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
