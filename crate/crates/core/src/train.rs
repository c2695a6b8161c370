//! Training: LR/HR pair sampling, the Lion optimizer with a step-halving
//! schedule, the single-image warm-up, checkpoints and resume.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapter::Mujica;
use crate::checkpoint::{self, Archive};
use crate::error::{Error, Result};
use crate::losses::{LossReport, Objective};
use crate::material::{bicubic_resample_set, load_material_set, random_crop_pair, DatasetIndex, MapKind, MaterialSet};
use crate::model::{ModelConfig, SISR_PREFIX};
use crate::params::{Graph, ParamSet};
use crate::render::{fibonacci_hemisphere, LightSet};
use crate::tensor::Tensor;

pub const SCHEDULE_FRACTIONS: [f64; 4] = [0.35, 0.6, 0.75, 0.9];
const MOMENTUM_PREFIX: &str = "opt.m.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Steps per epoch; `0` means one step per `batch` materials.
    pub steps_per_epoch: usize,
    pub batch: usize,
    /// LR patch side in pixels.
    pub patch: usize,
    pub lr0: f64,
    pub schedule_fractions: Vec<f64>,
    pub seed: u64,
    pub lights_n: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Single-image steps fitted before the backbone and head are frozen.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// Checkpoint period in steps; `0` writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            steps_per_epoch: 0,
            batch: 2,
            patch: 64,
            lr0: 1e-4,
            schedule_fractions: SCHEDULE_FRACTIONS.to_vec(),
            seed: 0,
            lights_n: 6,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            warmup_steps: 0,
            warmup_lr: 1e-3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.patch == 0 || self.patch % model.window != 0 {
            return bad(format!("patch {} is not a multiple of window {}", self.patch, model.window));
        }
        if self.lights_n == 0 {
            return bad("lights_n must be at least 1".into());
        }
        let f = &self.schedule_fractions;
        if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) || f.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("schedule fractions {f:?} must increase strictly inside (0, 1)"));
        }
        if !(self.lr0 > 0.0) || !(self.warmup_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn total_steps(&self, materials: usize) -> usize {
        let per_epoch = if self.steps_per_epoch > 0 { self.steps_per_epoch } else { materials.div_ceil(self.batch).max(1) };
        self.epochs * per_epoch
    }
}

/// `lr0 · 2^(−k)` with `k` the number of fractions at or below `step/total`.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64, fractions: &[f64]) -> f64 {
    let progress = step as f64 / total_steps.max(1) as f64;
    let k = fractions.iter().filter(|&&f| f <= progress).count();
    lr0 * 0.5f64.powi(k as i32)
}

/// Sign-momentum optimizer:
/// `u = sign(β1·m + (1−β1)·g)`, `θ ← θ − lr·(u + wd·θ)`, `m ← β2·m + (1−β2)·g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lion {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub momentum: BTreeMap<String, Tensor<f32>>,
    pub steps: u64,
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Lion {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, weight_decay, momentum: BTreeMap::new(), steps: 0 }
    }

    /// The update direction `sign(β1·m + (1−β1)·g)` for one tensor.
    pub fn direction(&self, name: &str, grad: &Tensor<f32>) -> Tensor<f32> {
        let (b1, c1) = (self.beta1 as f32, (1.0 - self.beta1) as f32);
        match self.momentum.get(name) {
            Some(m) => Tensor::from_vec(
                grad.shape(),
                m.data().iter().zip(grad.data()).map(|(&m, &g)| sign(b1 * m + c1 * g)).collect(),
            )
            .expect("shape"),
            None => grad.map(|g| sign(c1 * g)),
        }
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if params.is_frozen(name) {
                continue;
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient of `{name}` is {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            let u = self.direction(name, g);
            let (lr, wd) = (lr as f32, self.weight_decay as f32);
            for (t, &d) in p.data_mut().iter_mut().zip(u.data()) {
                *t -= lr * (d + wd * *t);
            }
            let (b2, c2) = (self.beta2 as f32, (1.0 - self.beta2) as f32);
            let m = self.momentum.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (m, &g) in m.data_mut().iter_mut().zip(g.data()) {
                *m = b2 * *m + c2 * g;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads.values().flat_map(|t| t.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = (max_norm / norm) as f32;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Aligned HR material and its bicubic LR counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub hr: MaterialSet,
    pub lr: MaterialSet,
}

impl Pair {
    pub fn from_hr(name: impl Into<String>, hr: MaterialSet, scale: usize) -> Result<Self> {
        let lr = bicubic_resample_set(&hr, 1.0 / scale as f64)?;
        Ok(Self { name: name.into(), hr, lr })
    }
}

/// Maps that training needs: the fused set plus what rendering requires.
pub fn required_maps(model: &ModelConfig) -> Vec<MapKind> {
    let mut kinds = model.fused_kinds();
    kinds.extend([MapKind::Basecolor, MapKind::Normal, MapKind::Roughness]);
    kinds.sort();
    kinds.dedup();
    kinds
}

pub fn load_pairs(index: &DatasetIndex, model: &ModelConfig) -> Result<Vec<Pair>> {
    let required = required_maps(model);
    index
        .entries
        .iter()
        .map(|(name, dir)| {
            let (hr, _) = load_material_set(dir, &required)?;
            Pair::from_hr(name.clone(), hr, model.scale)
        })
        .collect()
}

/// One sample's loss and gradients for every bound trainable parameter.
pub fn sample_gradients(
    model: &Mujica<f32>,
    lr: &MaterialSet,
    hr: &MaterialSet,
    lights: &LightSet,
    obj: &Objective,
) -> Result<(LossReport, BTreeMap<String, Tensor<f32>>)> {
    let mut g = Graph::new(&model.params);
    let mut inputs = BTreeMap::new();
    for m in model.config.fused_kinds() {
        inputs.insert(m, g.constant(lr.require(m)?.pixels.clone()));
    }
    let gt: BTreeMap<_, _> = hr.maps().map(|m| (m.kind, g.constant(m.pixels.clone()))).collect();
    let sr = model.forward(&mut g, &inputs)?;
    let terms = crate::losses::total_loss(&mut g, &sr, &gt, lights, obj)?;
    let grads = g.param_grads(terms.loss);
    Ok((terms.report, grads))
}

fn mean_gradients(parts: Vec<BTreeMap<String, Tensor<f32>>>) -> BTreeMap<String, Tensor<f32>> {
    let n = parts.len() as f32;
    let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for part in parts {
        for (k, t) in part {
            match acc.get_mut(&k) {
                Some(a) => a.add_assign(&t),
                None => {
                    acc.insert(k, t);
                }
            }
        }
    }
    for t in acc.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    acc
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    total_steps: u64,
    warmed_up: bool,
    rng_seed: [u8; 32],
    rng_word_pos: String,
    opt_steps: u64,
}

/// Model, optimizer and sampling stream for one run.
pub struct Trainer {
    pub model: Mujica<f32>,
    pub opt: Lion,
    pub cfg: TrainConfig,
    pub objective: Objective,
    pub lights: LightSet,
    pub step: u64,
    pub total_steps: u64,
    pub warmed_up: bool,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Mujica<f32>, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate(&model.config)?;
        let lights = fibonacci_hemisphere(cfg.lights_n)?;
        Ok(Self {
            opt: Lion::new(cfg.beta1, cfg.beta2, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d75_6a69_6361),
            model,
            cfg,
            objective: Objective::default(),
            lights,
            step: 0,
            total_steps: total_steps as u64,
            warmed_up: false,
        })
    }

    /// Fresh model seeded from `cfg.seed`.
    pub fn from_configs(model: ModelConfig, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        let m = Mujica::new(model, cfg.seed)?;
        Self::new(m, cfg, total_steps)
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.step as usize, self.total_steps as usize, self.cfg.lr0, &self.cfg.schedule_fractions)
    }

    /// Draws `batch` aligned crops from `pairs`.
    pub fn sample_batch(&mut self, pairs: &[Pair]) -> Result<Vec<(MaterialSet, MaterialSet)>> {
        if pairs.is_empty() {
            return Err(Error::Invalid("no training materials".into()));
        }
        let scale = self.model.config.scale;
        (0..self.cfg.batch)
            .map(|_| {
                let i = self.rng.gen_range(0..pairs.len());
                let (hr, lr) = random_crop_pair(&pairs[i].hr, &pairs[i].lr, self.cfg.patch, scale, &mut self.rng)?;
                Ok((lr, hr))
            })
            .collect()
    }

    /// Mean loss over `batch` without updating anything.
    pub fn loss(&self, batch: &[(MaterialSet, MaterialSet)]) -> Result<LossReport> {
        let reports: Vec<LossReport> = batch
            .par_iter()
            .map(|(lr, hr)| sample_gradients(&self.model, lr, hr, &self.lights, &self.objective).map(|(r, _)| r))
            .collect::<Result<_>>()?;
        Ok(LossReport::mean(&reports))
    }

    /// Forward, loss, backward and one optimizer update over `batch`
    /// (`(lr, hr)` crops). Only adapter parameters move.
    pub fn train_step(&mut self, batch: &[(MaterialSet, MaterialSet)]) -> Result<LossReport> {
        let model = &self.model;
        let (lights, obj) = (&self.lights, &self.objective);
        let results: Vec<(LossReport, BTreeMap<String, Tensor<f32>>)> = batch
            .par_iter()
            .map(|(lr, hr)| sample_gradients(model, lr, hr, lights, obj))
            .collect::<Result<_>>()?;
        let (reports, grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let report = LossReport::mean(&reports);
        let mut grads = mean_gradients(grads);
        let finite = grads.values().all(|t| t.all_finite());
        if !report.is_finite() || !finite {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("loss report {} (gradients finite: {finite})", report.to_json_line()),
            });
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let lr = self.lr();
        self.opt.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(report)
    }

    /// Fits the single-image path on every map of `pairs` with a
    /// Charbonnier loss, then freezes it and re-initialises the FFE stacks
    /// from the fitted backbone. Returns per-step losses.
    pub fn warm_up(&mut self, pairs: &[Pair], steps: usize) -> Result<Vec<f64>> {
        self.model.params.unfreeze_prefix(SISR_PREFIX);
        let mut opt = Lion::new(self.cfg.beta1, self.cfg.beta2, 0.0);
        let mut losses = Vec::with_capacity(steps);
        let eps = self.objective.eps;
        for s in 0..steps {
            let batch = self.sample_batch(pairs)?;
            let model = &self.model;
            let results: Vec<(f64, BTreeMap<String, Tensor<f32>>)> = batch
                .par_iter()
                .map(|(lr, hr)| {
                    let mut g = Graph::new(&model.params);
                    let mut terms = Vec::new();
                    for map in lr.maps() {
                        let x = g.constant(map.pixels.clone());
                        let y = model.sisr_forward(&mut g, x)?;
                        let t = g.constant(hr.require(map.kind)?.pixels.clone());
                        terms.push(g.charbonnier(y, t, eps)?);
                    }
                    let loss = g.add_scalars(&terms)?;
                    let value = g.value(loss).data()[0] as f64;
                    Ok((value, g.param_grads(loss)))
                })
                .collect::<Result<_>>()?;
            let (values, grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            let loss = values.iter().sum::<f64>() / values.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite { step: s as u64, detail: format!("warm-up loss {loss}") });
            }
            let mut grads = mean_gradients(grads);
            if let Some(c) = self.cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let lr = lr_at(s, steps, self.cfg.warmup_lr, &self.cfg.schedule_fractions);
            opt.step(&mut self.model.params, &grads, lr)?;
            losses.push(loss);
        }
        self.model.params.freeze_prefix(SISR_PREFIX);
        self.model.reset_ffe_from_backbone()?;
        self.warmed_up = true;
        Ok(losses)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let state = TrainState {
            step: self.step,
            total_steps: self.total_steps,
            warmed_up: self.warmed_up,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            opt_steps: self.opt.steps,
        };
        let mut extra = BTreeMap::new();
        extra.insert("train".to_string(), serde_json::to_value(&self.cfg)?);
        extra.insert("state".to_string(), serde_json::to_value(&state)?);
        let mut archive = checkpoint::model_archive(&self.model, &extra)?;
        for (k, m) in &self.opt.momentum {
            archive.tensors.insert(format!("{MOMENTUM_PREFIX}{k}"), m.clone());
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_archive()?)
    }

    /// Restores model, optimizer momentum, step counter and sampling stream.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let model = checkpoint::model_from_archive(archive)?;
        let cfg: TrainConfig = serde_json::from_value(
            archive.meta.get("train").cloned().ok_or_else(|| Error::Checkpoint("no training config".into()))?,
        )?;
        let state: TrainState = serde_json::from_value(
            archive.meta.get("state").cloned().ok_or_else(|| Error::Checkpoint("no training state".into()))?,
        )?;
        let mut t = Self::new(model, cfg, state.total_steps as usize)?;
        t.step = state.step;
        t.warmed_up = state.warmed_up;
        t.opt.steps = state.opt_steps;
        t.rng = ChaCha8Rng::from_seed(state.rng_seed);
        let pos: u128 = state.rng_word_pos.parse().map_err(|_| Error::Checkpoint("bad rng position".into()))?;
        t.rng.set_word_pos(pos);
        for (k, m) in &archive.tensors {
            if let Some(name) = k.strip_prefix(MOMENTUM_PREFIX) {
                t.opt.momentum.insert(name.to_string(), m.clone());
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&checkpoint::read(path)?)
    }
}

/// Result of [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub reports: Vec<LossReport>,
    pub warmup_losses: Vec<f64>,
}

fn log_line(path: &Path, value: &Value) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{value}")?;
    Ok(())
}

/// Full run into `out_dir`: warm-up (unless resuming past it), the step
/// loop with periodic checkpoints, and `final.ckpt`. The log is
/// `train.jsonl`, one record per step.
pub fn run_training(
    pairs: &[Pair],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let log = out_dir.join("train.jsonl");
    let mut trainer = match resume {
        Some(p) => Trainer::load(p)?,
        None => {
            if log.exists() {
                fs::remove_file(&log)?;
            }
            let total = cfg.total_steps(pairs.len());
            Trainer::from_configs(model_cfg, cfg, total)?
        }
    };
    let mut warmup_losses = Vec::new();
    if !trainer.warmed_up {
        warmup_losses = trainer.warm_up(pairs, trainer.cfg.warmup_steps)?;
        for (i, l) in warmup_losses.iter().enumerate() {
            log_line(&log, &json!({"phase": "warmup", "step": i, "loss": l}))?;
        }
    }
    let mut reports = Vec::new();
    while trainer.step < trainer.total_steps {
        let lr = trainer.lr();
        let batch = trainer.sample_batch(pairs)?;
        let report = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                trainer.save(&out_dir.join(format!("nonfinite_step{}.ckpt", trainer.step)))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log_line(&log, &json!({"phase": "train", "step": trainer.step - 1, "lr": lr, "report": report}))?;
        reports.push(report);
        let every = trainer.cfg.checkpoint_every as u64;
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.total_steps {
            trainer.save(&out_dir.join(format!("step{:06}.ckpt", trainer.step)))?;
        }
    }
    let checkpoint = out_dir.join("final.ckpt");
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome { checkpoint, log, reports, warmup_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_plateaus() {
        let f = SCHEDULE_FRACTIONS;
        assert_eq!(lr_at(0, 100, 1.0, &f), 1.0);
        assert_eq!(lr_at(50, 100, 1.0, &f), 0.5);
        assert_eq!(lr_at(95, 100, 1.0, &f), 1.0 / 16.0);
        assert_eq!(lr_at(35, 100, 1.0, &f), 0.5);
        assert_eq!(lr_at(34, 100, 1.0, &f), 1.0);
    }

    #[test]
    fn lion_update_rule() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[2], vec![0.0f32, 0.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[2], vec![1.0f32, 0.0]).unwrap());
        let mut opt = Lion::new(0.9, 0.99, 0.0);
        opt.step(&mut ps, &grads, 0.1).unwrap();
        assert!((ps.get("w").unwrap().data()[0] + 0.1).abs() < 1e-7);
        assert_eq!(ps.get("w").unwrap().data()[1], 0.0);
        assert!((opt.momentum["w"].data()[0] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn lion_skips_frozen_and_checks_shapes() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::full(&[2], 1.0f32));
        ps.insert("b", Tensor::full(&[2], 1.0f32));
        ps.freeze_prefix("a");
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::full(&[2], 1.0f32));
        let mut opt = Lion::new(0.9, 0.99, 0.0);
        opt.step(&mut ps, &grads, 0.1).unwrap();
        assert_eq!(ps.get("a").unwrap().data(), &[1.0, 1.0]);
        assert!(opt.momentum.is_empty());
        grads.insert("b".to_string(), Tensor::full(&[3], 1.0f32));
        assert!(opt.step(&mut ps, &grads, 0.1).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let m = ModelConfig::default();
        assert!(TrainConfig::default().validate(&m).is_ok());
        assert!(TrainConfig { batch: 0, ..Default::default() }.validate(&m).is_err());
        assert!(TrainConfig { patch: 60, ..Default::default() }.validate(&m).is_err());
        let bad = TrainConfig { schedule_fractions: vec![0.6, 0.35], ..Default::default() };
        assert!(bad.validate(&m).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bacth": 2}"#).is_err());
    }
}
