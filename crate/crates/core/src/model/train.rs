//! Minibatch training: AdamW, warm-up plus cosine schedule, gradient clipping
//! and early stopping on validation accuracy.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{class_weights, Model, Params, VerseExample};
use crate::encoder::Parameters;
use crate::error::{Error, Result};
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    None,
    InverseFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Shrink parameters inside the optimizer step (AdamW).
    Decoupled,
    /// Add `λ‖θ‖²` to the loss and let Adam see its gradient.
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub seed: u64,
    pub class_weighting: Weighting,
    pub decay: DecayMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    /// Settings used for fine-tuning a pretrained 768-wide encoder.
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.01,
            batch_size: 32,
            max_epochs: 16,
            warmup_fraction: 0.10,
            clip_norm: 1.0,
            patience: 3,
            seed: 1,
            class_weighting: Weighting::InverseFrequency,
            decay: DecayMode::Decoupled,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Same schedule with a learning rate suited to a small encoder trained from scratch.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("lr, weight_decay and clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warm-up over `warmup` steps, then cosine decay to zero at `total`.
/// `step` counts from 1.
pub fn learning_rate(lr_max: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step <= warmup {
        return lr_max * step as f64 / warmup.max(1) as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments with decoupled or coupled weight decay.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(params: &impl Parameters, cfg: &TrainConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64, decoupled_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let gs = grads.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = gs[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p[j] -= lr * (update + decoupled_decay * p[j]);
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.sum_sq().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation score; stops after `patience` epochs without a
/// strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub stopped_early: bool,
    pub class_weights: Vec<f64>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_accuracy,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6e}", e.epoch, e.train_loss, e.valid_accuracy, e.lr);
        }
        out
    }
}

pub struct FitOutcome {
    /// Parameters from the best validation epoch, rounded to `f32` precision.
    pub model: Model,
    pub log: TrainingLog,
}

/// Verse-level accuracy of argmax predictions.
pub fn accuracy(model: &Model, data: &[VerseExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for chunk in data.chunks(256) {
        let refs: Vec<&VerseExample> = chunk.iter().collect();
        let probs = model.predict_proba(&refs)?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(r, e)| argmax(probs.row(*r)) == e.label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn fit(mut model: Model, train: &[VerseExample], valid: &[VerseExample], cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    let classes = model.classes();
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    let weights = match cfg.class_weighting {
        Weighting::InverseFrequency => class_weights(&labels, classes)?,
        Weighting::None => vec![1.0; classes],
    };

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.max_epochs;
    let warmup = ((cfg.warmup_fraction * total as f64).round() as usize).max(1);
    let decoupled = match cfg.decay {
        DecayMode::Decoupled => cfg.weight_decay,
        DecayMode::Coupled => 0.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut log = TrainingLog {
        class_weights: weights.clone(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut lr = 0.0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            lr = learning_rate(cfg.lr, step, warmup, total);
            let batch: Vec<&VerseExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (mut loss, mut grads) = model.loss_and_grad(&batch, &weights, Some(&mut rng))?;
            if cfg.decay == DecayMode::Coupled && cfg.weight_decay > 0.0 {
                loss += cfg.weight_decay * model.params.sum_sq();
                let two_l = 2.0 * cfg.weight_decay;
                let ps = model.params.tensors();
                for (i, g) in grads.tensors_mut().into_iter().enumerate() {
                    for (gj, pj) in g.iter_mut().zip(ps[i].data) {
                        *gj += two_l * pj;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: (epoch - 1) * per_epoch + bi,
                    lr,
                });
            }
            loss_sum += loss;
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.params, &grads, lr, decoupled);
        }
        let valid_accuracy = accuracy(&model, valid)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / per_epoch as f64,
            valid_accuracy,
            lr,
        });
        match stopper.observe(epoch, valid_accuracy) {
            StopDecision::Improved => best = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.best_epoch = stopper.best_epoch();
    log.best_valid_accuracy = stopper.best_score().unwrap_or(0.0);
    best.round_to_f32();
    model.params = best;
    Ok(FitOutcome { model, log })
}
