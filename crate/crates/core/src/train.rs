//! Loss, learning-rate schedule, Adam and the training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::data::{batch_images, SliceSample};
use crate::error::{Error, Result};
use crate::heads::{sigmoid, LogitMap};
use crate::mask::Mask;
use crate::model::SegModel;
use crate::nn::{Param, Parameterized};

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean binary cross-entropy plus soft Dice, equally weighted.
    #[default]
    BceDice,
    Bce,
    Dice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_milestones: Vec<f64>,
    pub lr_factor: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub device: String,
    /// Skip weight decay on the calibrator's output bias.
    pub exclude_calibrator_bias_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Probability threshold used for validation Dice.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 1e-6,
            batch_size: 14,
            epochs: 90,
            lr_milestones: vec![0.5, 0.7, 0.9],
            lr_factor: 0.5,
            loss: LossKind::BceDice,
            seed: 0,
            device: "cpu".into(),
            exclude_calibrator_bias_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.lr_milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
            return bad(format!("lr_milestones must lie in (0, 1), got {:?}", self.lr_milestones));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_milestones must be strictly increasing, got {:?}", self.lr_milestones));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor));
        }
        if self.device != "cpu" {
            return bad(format!("unsupported device `{}` (only cpu is available)", self.device));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }

    /// First epoch at which each milestone takes effect.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.lr_milestones
            .iter()
            .map(|m| {
                let at = m * self.epochs as f64;
                let nearest = at.round();
                if (at - nearest).abs() < 1e-9 {
                    nearest as usize
                } else {
                    at.floor() as usize
                }
            })
            .collect()
    }
}

/// `base_lr * factor^k`, with `k` the number of milestone epochs reached.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside 0..{}", config.epochs)));
    }
    let passed = config.milestone_epochs().iter().filter(|&&m| epoch >= m).count();
    Ok(config.base_lr * config.lr_factor.powi(passed as i32))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
}

fn check_target(logits: &LogitMap, target: &Mask) -> Result<()> {
    if target.dims() != [logits.batch, logits.height, logits.width] {
        return Err(Error::Shape(format!(
            "target {:?} does not match logits {}x{}x{}",
            target.dims(),
            logits.batch,
            logits.height,
            logits.width
        )));
    }
    Ok(())
}

/// Loss value and its gradient with respect to every logit.
pub fn loss_and_grad(logits: &LogitMap, target: &Mask, kind: LossKind) -> Result<(LossParts, Vec<f64>)> {
    check_target(logits, target)?;
    let n = logits.values.len() as f64;
    let t = target.data();
    let p: Vec<f64> = logits.values.iter().map(|&s| sigmoid(s)).collect();
    let bce = logits.values.iter().zip(t).map(|(&s, &y)| s.max(0.0) - s * y as f64 + (-s.abs()).exp().ln_1p()).sum::<f64>() / n;
    let inter: f64 = p.iter().zip(t).map(|(&a, &y)| a * y as f64).sum();
    let psum: f64 = p.iter().sum();
    let tsum = target.count() as f64;
    let denom = psum + tsum + DICE_SMOOTH;
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom;
    let (wb, wd) = match kind {
        LossKind::BceDice => (1.0, 1.0),
        LossKind::Bce => (1.0, 0.0),
        LossKind::Dice => (0.0, 1.0),
    };
    let grad = p
        .iter()
        .zip(t)
        .map(|(&pi, &y)| {
            let y = y as f64;
            let g_bce = (pi - y) / n;
            let d_score = (2.0 * y * denom - (2.0 * inter + DICE_SMOOTH)) / (denom * denom);
            let g_dice = -d_score * pi * (1.0 - pi);
            wb * g_bce + wd * g_dice
        })
        .collect();
    Ok((LossParts { total: wb * bce + wd * dice, bce, dice }, grad))
}

pub fn loss(logits: &LogitMap, target: &Mask, kind: LossKind) -> Result<f64> {
    Ok(loss_and_grad(logits, target, kind)?.0.total)
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &impl Parameterized) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |p| m.push(vec![0.0; p.len()]));
        let v = m.clone();
        Self { step: 0, m, v }
    }

    pub fn update(&mut self, model: &mut impl Parameterized, lr: f64, config: &TrainConfig, no_decay: &[String]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut k = 0;
        model.visit_params_mut(&mut |p: &mut Param| {
            let wd = if no_decay.contains(&p.name) { 0.0 } else { config.weight_decay };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + config.adam_eps);
            }
            k += 1;
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch with the highest validation Dice, earliest on ties.
    pub selected_epoch: Option<usize>,
    #[serde(default)]
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainHistory {
    fn push(&mut self, record: EpochRecord) -> bool {
        let better = match self.selected_epoch {
            None => true,
            Some(e) => record.val_dice > self.records[e].val_dice,
        };
        if better {
            self.selected_epoch = Some(record.epoch);
        }
        self.records.push(record);
        better
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["epoch", "lr", "train_loss", "val_dice", "selected"]).map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:e}", r.lr),
                format!("{:.8}", r.train_loss),
                format!("{:.8}", r.val_dice),
                (Some(r.epoch) == self.selected_epoch).to_string(),
            ])
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Records, selected epoch and best-checkpoint path as JSON.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Where and how a training run persists its state.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `last.ckpt` and `best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` when present.
    pub resume: bool,
    /// Return after this many epochs have completed in total.
    pub stop_after: Option<usize>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Batch order of one epoch, a pure function of seed and epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Pooled voxel Dice over all samples at the given probability threshold.
pub fn pooled_dice(model: &SegModel, samples: &[SliceSample], batch_size: usize, threshold: f64) -> Result<f64> {
    let (mut inter, mut total) = (0usize, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let logits = model.predict(&batch_images(&refs)?)?;
        let pred = crate::heads::segment(&logits, threshold)?;
        let labels: Vec<u8> = chunk.iter().flat_map(|s| s.label.data().iter().copied()).collect();
        for (&p, &g) in pred.data().iter().zip(&labels) {
            inter += (p & g) as usize;
            total += (p + g) as usize;
        }
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

fn no_decay_names(model: &SegModel, config: &TrainConfig) -> Vec<String> {
    if !config.exclude_calibrator_bias_decay || model.head().calibrator().is_none() {
        return Vec::new();
    }
    vec![format!("head.calibrator.{}.bias", model.config().head.calibrator_hidden.len())]
}

fn training_checkpoint(model: &SegModel, adam: &Adam, history: &TrainHistory, config: &TrainConfig) -> Checkpoint {
    let mut ckpt = model.to_checkpoint();
    ckpt.kind = "training".into();
    ckpt.epoch = history.records.last().map(|r| r.epoch);
    let mut names = Vec::new();
    model.visit_params(&mut |p| names.push((p.name.clone(), p.shape.clone())));
    for (k, (name, shape)) in names.iter().enumerate() {
        ckpt.arrays.push(NamedArray { name: format!("adam.m.{name}"), shape: shape.clone(), values: adam.m[k].clone() });
        ckpt.arrays.push(NamedArray { name: format!("adam.v.{name}"), shape: shape.clone(), values: adam.v[k].clone() });
    }
    ckpt.extra = serde_json::json!({ "adam_step": adam.step, "history": history, "train": config });
    ckpt
}

fn restore(ckpt: &Checkpoint, model: &mut SegModel, config: &TrainConfig) -> Result<(Adam, TrainHistory)> {
    model.load_params(ckpt)?;
    let saved: TrainConfig = serde_json::from_value(ckpt.extra["train"].clone())
        .map_err(|e| Error::Config(format!("training checkpoint lacks its config: {e}")))?;
    if &saved != config {
        return Err(Error::Config("training checkpoint was written with a different train config".into()));
    }
    let mut adam = Adam::new(model);
    adam.step = ckpt.extra["adam_step"].as_u64().unwrap_or(0);
    let mut k = 0;
    let mut missing = None;
    model.visit_params(&mut |p| {
        match (ckpt.array(&format!("adam.m.{}", p.name)), ckpt.array(&format!("adam.v.{}", p.name))) {
            (Some(m), Some(v)) if m.values.len() == p.len() && v.values.len() == p.len() => {
                adam.m[k].copy_from_slice(&m.values);
                adam.v[k].copy_from_slice(&v.values);
            }
            _ => {
                missing.get_or_insert_with(|| p.name.clone());
            }
        }
        k += 1;
    });
    if let Some(name) = missing {
        return Err(Error::Config(format!("training checkpoint lacks optimizer state for `{name}`")));
    }
    let history: TrainHistory = serde_json::from_value(ckpt.extra["history"].clone())
        .map_err(|e| Error::Config(format!("training checkpoint lacks its history: {e}")))?;
    Ok((adam, history))
}

/// Trains `model` and returns the parameters from the epoch with the best
/// validation Dice together with the full history.
pub fn train_model(
    mut model: SegModel,
    train: &[SliceSample],
    val: &[SliceSample],
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<(SegModel, TrainHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation split is empty".into()));
    }
    let no_decay = no_decay_names(&model, config);
    let mut adam = Adam::new(&model);
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let last_path = options.checkpoint_dir.as_ref().map(|d| d.join(LAST_CHECKPOINT));
    let best_path = options.checkpoint_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT));
    if options.resume {
        if let Some(path) = last_path.as_ref().filter(|p| p.exists()) {
            let (a, h) = restore(&Checkpoint::load(path)?, &mut model, config)?;
            adam = a;
            history = h;
            best = match best_path.as_ref().filter(|p| p.exists()) {
                Some(p) => SegModel::load(p)?,
                None => model.clone(),
            };
        }
    }
    let start = history.records.len();
    let end = options.stop_after.map_or(config.epochs, |s| s.min(config.epochs));
    for epoch in start..end {
        let lr = lr_at(epoch, config)?;
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&SliceSample> = idx.iter().map(|&i| &train[i]).collect();
            let images = batch_images(&refs)?;
            let planes: Vec<Mask> = refs.iter().map(|s| s.label.clone()).collect();
            let target = Mask::stack(&planes)?;
            let (logits, trace) = model.forward(&images)?;
            let (parts, grad) = loss_and_grad(&logits, &target, config.loss)?;
            if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            model.zero_grad();
            model.backward(&trace, &grad);
            adam.update(&mut model, lr, config, &no_decay);
            loss_sum += parts.total;
            batches += 1;
        }
        let val_dice = pooled_dice(&model, val, config.batch_size, config.threshold)?;
        let record = EpochRecord { epoch, lr, train_loss: loss_sum / batches as f64, val_dice };
        if options.verbose {
            eprintln!("epoch {epoch:>3}  lr {lr:.3e}  loss {:.5}  val_dice {val_dice:.4}", record.train_loss);
        }
        if history.push(record) {
            best = model.clone();
            if let Some(p) = &best_path {
                best.save(p)?;
            }
        }
        if let Some(p) = &last_path {
            training_checkpoint(&model, &adam, &history, config).save(p)?;
        }
    }
    history.best_checkpoint = best_path.filter(|p| p.exists());
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(values: Vec<f64>) -> LogitMap {
        let n = values.len();
        LogitMap::new(1, 1, n, values).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c).unwrap(), 1e-3);
        assert_eq!(lr_at(44, &c).unwrap(), 1e-3);
        assert_eq!(lr_at(45, &c).unwrap(), 5e-4);
        assert_eq!(lr_at(62, &c).unwrap(), 5e-4);
        assert_eq!(lr_at(63, &c).unwrap(), 2.5e-4);
        assert_eq!(c.milestone_epochs(), vec![45, 63, 81]);
        assert_eq!(lr_at(81, &c).unwrap(), 1.25e-4);
        assert!(lr_at(90, &c).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_milestones: vec![0.7, 0.5], ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { device: "cuda".into(), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn saturated_correct_loss() {
        let t = Mask::from_fn([1, 1, 8], |_, _, _| true);
        assert!(loss(&logits(vec![20.0; 8]), &t, LossKind::BceDice).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_logits_bce() {
        let t = Mask::from_fn([1, 1, 5], |_, _, _| true);
        let (parts, _) = loss_and_grad(&logits(vec![0.0; 5]), &t, LossKind::BceDice).unwrap();
        assert!((parts.bce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let t = Mask::zeros([1, 1, 4]);
        assert!(loss(&logits(vec![0.0; 5]), &t, LossKind::Bce).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vals = vec![-1.3, 0.4, 2.0, -0.2, 0.9, -2.5];
        let t = Mask::from_vec([1, 1, 6], vec![1, 0, 1, 1, 0, 0]).unwrap();
        for kind in [LossKind::BceDice, LossKind::Bce, LossKind::Dice] {
            let (_, g) = loss_and_grad(&logits(vals.clone()), &t, kind).unwrap();
            for i in 0..vals.len() {
                let h = 1e-6;
                let mut a = vals.clone();
                a[i] += h;
                let mut b = vals.clone();
                b[i] -= h;
                let fd = (loss(&logits(a), &t, kind).unwrap() - loss(&logits(b), &t, kind).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-8, "{kind:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn batch_order_is_a_permutation() {
        let o = epoch_order(10, 3, 2);
        let mut s = o.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(o, epoch_order(10, 3, 2));
        assert_ne!(o, epoch_order(10, 3, 3));
    }

    #[test]
    fn selection_prefers_earliest_tie() {
        let mut h = TrainHistory::default();
        for (e, d) in [0.5, 0.7, 0.7, 0.6].into_iter().enumerate() {
            h.push(EpochRecord { epoch: e, lr: 1e-3, train_loss: 1.0, val_dice: d });
        }
        assert_eq!(h.selected_epoch, Some(1));
    }
}
