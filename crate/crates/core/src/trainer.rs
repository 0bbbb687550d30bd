//! Training loop: per-batch occlusion augmentation, dual-stream forward,
//! the four losses, SGD with momentum, cosine schedule, checkpoints.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{flip_pad_crop, images_to_tensor, key, Dataset, PkSampler, PkSpec, Sample};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::{FcFormer, ModelConfig};
use crate::numerics::{Checkpoint, Graph, ParamStore, Tensor};
use crate::oia::{augment_batch, AugmentConfig, Placement, DEFAULT_DELTA_RANGE};
use crate::oil::{make_synthetic_library, Library};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub base_lr: f32,
    pub pk: PkSpec,
    pub seed: u64,
    pub delta_range: (f32, f32),
    pub placement: Placement,
    /// Paste occluders; when false the occluded stream sees the holistic image.
    pub use_oia: bool,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_frac: f32,
    /// Zero padding before the random crop.
    pub pad: u32,
    /// Occluders per prior in the generated training library.
    pub library_size: usize,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub grad_clip: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 30,
            base_lr: 0.008,
            pk: PkSpec { p: 4, k: 4 },
            seed: 0,
            delta_range: DEFAULT_DELTA_RANGE,
            placement: Placement::Random,
            use_oia: true,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_frac: 0.05,
            pad: 2,
            library_size: 8,
            checkpoint_every: 0,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        if self.epochs == 0 {
            v.push("epochs must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            v.push(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if let Err(e) = self.pk.validate() {
            v.push(e.to_string());
        }
        let (lo, hi) = self.delta_range;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            v.push(format!("delta range ({lo}, {hi}) must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            v.push(format!("warmup_frac {} must lie in [0, 1)", self.warmup_frac));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                v.push(format!("grad_clip {c} must be positive"));
            }
        }
        if self.library_size == 0 {
            v.push("library_size must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// `base·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f32) -> f32 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    (base_lr as f64 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0) as f32
}

/// Cosine decay scaled by a linear ramp over the first `warmup_frac` of steps.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f32, warmup_frac: f32) -> f32 {
    let warmup = (warmup_frac as f64 * total_steps as f64).floor() as usize;
    let lr = cosine_lr(step, total_steps, base_lr);
    if step < warmup {
        lr * (step + 1) as f32 / warmup as f32
    } else {
        lr
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μv + (g + λw)`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    /// Indexed like the parameter store.
    pub velocity: Vec<Option<Tensor>>,
}

pub const MOMENTUM_PREFIX: &str = "optim.momentum.";

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        self.velocity.resize(store.len(), None);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            let (w, g, v) = (p.value.data_mut(), p.grad.data(), v.data_mut());
            for j in 0..w.len() {
                v[j] = self.momentum * v[j] + g[j] + self.weight_decay * w[j];
                w[j] -= lr * v[j];
            }
        }
    }

    fn save_into(&self, store: &ParamStore, ckpt: &mut Checkpoint) {
        for (id, p) in store.iter() {
            if let Some(Some(v)) = self.velocity.get(id.index()) {
                ckpt.tensors.push((format!("{MOMENTUM_PREFIX}{}", p.name), v.clone()));
            }
        }
    }

    fn load_from(&mut self, store: &ParamStore, ckpt: &Checkpoint) {
        self.velocity = store
            .iter()
            .map(|(_, p)| ckpt.get(&format!("{MOMENTUM_PREFIX}{}", p.name)).cloned())
            .collect();
    }
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f32,
    #[serde(flatten)]
    pub loss: LossReport,
}

pub const METRICS_HEADER: [&str; 7] = ["step", "lr", "id", "fcd", "cht", "fc2", "total"];

/// Writes the metrics CSV.
pub fn write_metrics(path: &Path, rows: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| Error::load(path, e))?;
    for r in rows {
        let l = r.loss;
        w.write_record([
            r.step.to_string(),
            r.lr.to_string(),
            l.id.to_string(),
            l.fcd.to_string(),
            l.cht.to_string(),
            l.fc2.to_string(),
            l.total.to_string(),
        ])
        .map_err(|e| Error::load(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Occluded partner images of one batch, from a per-step RNG.
pub fn prepare_batch(
    samples: &[&Sample],
    lib: &Library,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<RgbImage>, Vec<RgbImage>)> {
    let holistic: Vec<RgbImage> = samples.iter().map(|s| flip_pad_crop(&s.image, cfg.pad, rng)).collect();
    let occluded = if cfg.use_oia {
        let batch: Vec<(RgbImage, usize, usize)> = holistic
            .iter()
            .zip(samples)
            .map(|(img, s)| (img.clone(), s.pid, s.cam))
            .collect();
        let aug = AugmentConfig {
            delta_range: cfg.delta_range,
            placement: cfg.placement,
        };
        augment_batch(&batch, lib, &aug, rng)?
            .into_iter()
            .map(|p| p.occluded)
            .collect()
    } else {
        holistic.clone()
    };
    Ok((holistic, occluded))
}

/// Global L2 norm of the trainable gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f32) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Forward, backward and parameter update on one batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut FcFormer,
    opt: &mut Sgd,
    holistic: &[RgbImage],
    occluded: &[RgbImage],
    cams: &[usize],
    labels: &[usize],
    lr: f32,
    grad_clip: Option<f32>,
) -> Result<LossReport> {
    let h = images_to_tensor(&holistic.iter().collect::<Vec<_>>())?;
    let o = images_to_tensor(&occluded.iter().collect::<Vec<_>>())?;
    let g = Graph::new();
    let fwd = model.net.forward_train(&g, &model.store, &h, &o, cams, labels)?;
    let grads = g.backward(fwd.loss)?;
    model.store.zero_grad();
    grads.accumulate_into(&mut model.store);
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut model.store, c);
    }
    opt.step(&mut model.store, lr);
    for u in &fwd.bn_updates {
        u.apply(&mut model.store);
    }
    if model.store.iter().any(|(_, p)| !p.value.is_finite()) {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(fwd.report)
}

/// Trainer state; resumable from a checkpoint at any step boundary.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: FcFormer,
    pub opt: Sgd,
    pub lib: Library,
    pub step: usize,
    pub log: Vec<StepLog>,
    schedule: Vec<Vec<usize>>,
}

pub const CONFIG_META: &str = "train_config";
pub const STEP_META: &str = "step";

impl Trainer {
    pub fn new(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        Self::with_library(cfg, data, make_synthetic_library(cfg.seed, cfg.library_size))
    }

    pub fn with_library(cfg: &TrainConfig, data: &Dataset, lib: Library) -> Result<Self> {
        cfg.validate()?;
        if let Some(s) = data.train.iter().find(|s| s.pid >= cfg.model.n_ids) {
            return Err(Error::Label {
                label: s.pid,
                classes: cfg.model.n_ids,
            });
        }
        if let Some(s) = data.train.iter().find(|s| s.cam >= cfg.model.encoder.n_cameras) {
            return Err(Error::Config(format!(
                "camera {} out of range for {} cameras",
                s.cam, cfg.model.encoder.n_cameras
            )));
        }
        let pids: Vec<usize> = data.train.iter().map(|s| s.pid).collect();
        let sampler = PkSampler::new(&pids, cfg.pk)?;
        let mut schedule = Vec::new();
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(key(&[cfg.seed, 0xe90c, epoch as u64]));
            schedule.extend(sampler.epoch(&mut rng));
        }
        Ok(Self {
            cfg: cfg.clone(),
            model: FcFormer::new(&cfg.model, cfg.seed)?,
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            lib,
            step: 0,
            log: Vec::new(),
            schedule,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.len()
    }

    pub fn done(&self) -> bool {
        self.step >= self.schedule.len()
    }

    /// Runs the next scheduled step.
    pub fn step_once(&mut self, data: &Dataset) -> Result<StepLog> {
        let idx = self
            .schedule
            .get(self.step)
            .ok_or_else(|| Error::Config("training schedule exhausted".into()))?
            .clone();
        let samples: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(key(&[self.cfg.seed, 0x57e9, self.step as u64]));
        let (hol, occ) = prepare_batch(&samples, &self.lib, &self.cfg, &mut rng)?;
        let cams: Vec<usize> = samples.iter().map(|s| s.cam).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.pid).collect();
        let lr = lr_at(self.step, self.total_steps(), self.cfg.base_lr, self.cfg.warmup_frac);
        let loss = train_step(&mut self.model, &mut self.opt, &hol, &occ, &cams, &labels, lr, self.cfg.grad_clip)?;
        let row = StepLog {
            step: self.step,
            lr,
            loss,
        };
        log::debug!("step {} lr {lr:.5} total {:.4}", self.step, loss.total);
        self.log.push(row);
        self.step += 1;
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_store(&self.model.store);
        self.opt.save_into(&self.model.store, &mut ckpt);
        ckpt.meta.insert(STEP_META.into(), self.step.to_string());
        ckpt.meta.insert(
            CONFIG_META.into(),
            serde_json::to_string(&self.cfg).expect("config serializes"),
        );
        ckpt
    }

    /// Rebuilds a trainer positioned right after the checkpointed step.
    pub fn resume(ckpt: &Checkpoint, data: &Dataset, lib: Library) -> Result<Self> {
        let cfg: TrainConfig = ckpt
            .meta
            .get(CONFIG_META)
            .ok_or_else(|| Error::Checkpoint("missing training config".into()))
            .and_then(|s| serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string())))?;
        let step: usize = ckpt
            .meta
            .get(STEP_META)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        let mut t = Self::with_library(&cfg, data, lib)?;
        ckpt.restore_into(&mut t.model.store)?;
        t.opt.load_from(&t.model.store, ckpt);
        t.step = step;
        Ok(t)
    }

    /// Runs to the end of the schedule. With `run_dir`, writes
    /// `config.json`, `metrics.csv` and `checkpoint.fcf` (plus periodic
    /// `checkpoint_e<epoch>.fcf`).
    pub fn fit(&mut self, data: &Dataset, run_dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("config.json");
            let text = serde_json::to_string_pretty(&self.cfg).expect("config serializes");
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        let per_epoch = (self.total_steps() / self.cfg.epochs).max(1);
        while !self.done() {
            self.step_once(data)?;
            if self.step % per_epoch == 0 {
                let epoch = self.step / per_epoch;
                let last = self.log.last().expect("a step ran").loss;
                log::info!("epoch {epoch} step {} total {:.4}", self.step, last.total);
                if let (Some(dir), true) = (run_dir, self.cfg.checkpoint_every > 0 && epoch % self.cfg.checkpoint_every == 0) {
                    self.checkpoint().save(dir.join(format!("checkpoint_e{epoch}.fcf")))?;
                    write_metrics(&dir.join("metrics.csv"), &self.log)?;
                }
            }
        }
        if let Some(dir) = run_dir {
            self.checkpoint().save(dir.join("checkpoint.fcf"))?;
            write_metrics(&dir.join("metrics.csv"), &self.log)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the finished trainer.
pub fn fit(cfg: &TrainConfig, data: &Dataset, run_dir: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg, data)?;
    t.fit(data, run_dir)?;
    Ok(t)
}

pub fn checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoint.fcf")
}
