//! Multi-input fusion, the classification head, and class-weighted cross-entropy.

mod checkpoint;
mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use train::{
    accuracy, clip_global_norm, fit, learning_rate, AdamW, DecayMode, EarlyStopping, EpochLog, FitOutcome, StopDecision,
    TrainConfig, TrainingLog, Weighting,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderParams, PaddedBatch, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::normalize::TokenSequence;
use crate::tensor::{matmul, matmul_at, matmul_bt, softmax_in_place, Mat};

/// Probability floor inside the log.
pub const LOG_EPS: f64 = 1e-12;

/// Which inputs are concatenated into the head's input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSpec {
    pub text: bool,
    pub semantic: bool,
    pub stylometric: bool,
    pub form: bool,
    pub meter: bool,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self {
            text: true,
            semantic: true,
            stylometric: true,
            form: true,
            meter: true,
        }
    }
}

/// The per-verse inputs, concatenated as text ∥ semantic ∥ stylometric ∥ form ∥ meter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedInput {
    pub h_text: Vec<f64>,
    pub h_semantic: Vec<f64>,
    pub h_stylometric: Vec<f64>,
    pub h_form: Vec<f64>,
    pub h_meter: Vec<f64>,
}

impl FusedInput {
    pub fn concat(&self, spec: &FusionSpec) -> Vec<f64> {
        let mut out = Vec::new();
        for (on, part) in [
            (spec.text, &self.h_text),
            (spec.semantic, &self.h_semantic),
            (spec.stylometric, &self.h_stylometric),
            (spec.form, &self.h_form),
            (spec.meter, &self.h_meter),
        ] {
            if on {
                out.extend_from_slice(part);
            }
        }
        out
    }
}

/// One training or evaluation instance: the token sequence for the encoder and
/// the already-concatenated non-text inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct VerseExample {
    pub tokens: TokenSequence,
    pub aux: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            dropout: 0.3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `hidden × d_concat`
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// `classes × hidden`
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(d_concat: usize, hidden: usize, classes: usize) -> Self {
        Self {
            w1: Mat::zeros(hidden, d_concat),
            b1: vec![0.0; hidden],
            w2: Mat::zeros(classes, hidden),
            b2: vec![0.0; classes],
        }
    }

    /// Fan-in scaled normal weights, zero biases.
    pub fn init(d_concat: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(d_concat, hidden, classes);
        for (m, fan_in) in [(&mut p.w1, d_concat), (&mut p.w2, hidden)] {
            let normal = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).expect("valid std");
            m.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = normal.sample(&mut rng));
        }
        p
    }

    pub fn d_concat(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn classes(&self) -> usize {
        self.w2.rows()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.b1.len() != h || self.w2.cols() != h || self.b2.len() != self.classes() {
            return Err(Error::Shape("classification head tensors disagree".into()));
        }
        Ok(())
    }
}

impl Parameters for HeadParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        vec![
            Tensor { name: "head.w1".into(), shape: self.w1.shape(), data: self.w1.as_slice() },
            Tensor { name: "head.b1".into(), shape: (1, self.b1.len()), data: &self.b1 },
            Tensor { name: "head.w2".into(), shape: self.w2.shape(), data: self.w2.as_slice() },
            Tensor { name: "head.b2".into(), shape: (1, self.b2.len()), data: &self.b2 },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2]
    }
}

pub struct HeadCache {
    input: Mat,
    hidden_pre: Mat,
    hidden: Mat,
    mask: Option<Mat>,
}

/// Batched head: rows of `x` are concatenated inputs; returns class probabilities.
pub fn head_forward(
    x: &Mat,
    p: &HeadParams,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Mat, HeadCache)> {
    p.check()?;
    if x.cols() != p.d_concat() {
        return Err(Error::Shape(format!(
            "head expects {} inputs, got {}",
            p.d_concat(),
            x.cols()
        )));
    }
    let mut hidden_pre = matmul_bt(x, &p.w1);
    hidden_pre.add_row_vector(&p.b1);
    let mut hidden = hidden_pre.clone();
    hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let mask = match rng {
        Some(r) if dropout > 0.0 => {
            let keep = 1.0 / (1.0 - dropout);
            let m = Mat::from_fn(hidden.rows(), hidden.cols(), |_, _| {
                if r.random::<f64>() < dropout {
                    0.0
                } else {
                    keep
                }
            });
            for (h, k) in hidden.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *h *= k;
            }
            Some(m)
        }
        _ => None,
    };
    let mut probs = matmul_bt(&hidden, &p.w2);
    probs.add_row_vector(&p.b2);
    for r in 0..probs.rows() {
        softmax_in_place(probs.row_mut(r));
    }
    Ok((
        probs,
        HeadCache {
            input: x.clone(),
            hidden_pre,
            hidden,
            mask,
        },
    ))
}

/// Backpropagates logit gradients; accumulates into `grads` and returns d(input).
pub fn head_backward(cache: &HeadCache, d_logits: &Mat, p: &HeadParams, grads: &mut HeadParams) -> Mat {
    grads.w2.add_assign(&matmul_at(d_logits, &cache.hidden));
    for (g, d) in grads.b2.iter_mut().zip(d_logits.col_sums()) {
        *g += d;
    }
    let mut d_hidden = matmul(d_logits, &p.w2);
    if let Some(m) = &cache.mask {
        for (d, k) in d_hidden.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *d *= k;
        }
    }
    for (d, h) in d_hidden.as_mut_slice().iter_mut().zip(cache.hidden_pre.as_slice()) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    grads.w1.add_assign(&matmul_at(&d_hidden, &cache.input));
    for (g, d) in grads.b1.iter_mut().zip(d_hidden.col_sums()) {
        *g += d;
    }
    matmul(&d_hidden, &p.w1)
}

/// `softmax(W₂·Dropout(ReLU(W₁·h + b₁)) + b₂)` for one fused vector. Dropout
/// applies only when `training` is set.
pub fn forward(
    h_concat: &[f64],
    p: &HeadParams,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let x = Mat::from_vec(1, h_concat.len(), h_concat.to_vec());
    let (probs, _) = head_forward(&x, p, dropout, training.then_some(rng))?;
    Ok(probs.into_vec())
}

/// `−w_y · ln ŷ_y`, with `ŷ_y` clamped at [`LOG_EPS`]. The flag reports clamping.
/// A NaN probability yields a NaN loss rather than being clamped away.
pub fn weighted_cross_entropy(probs: &[f64], y: usize, weights: &[f64]) -> Result<(f64, bool)> {
    let p = *probs
        .get(y)
        .ok_or_else(|| Error::Shape(format!("label {y} outside {} classes", probs.len())))?;
    let w = *weights
        .get(y)
        .ok_or_else(|| Error::Shape("class weight vector too short".into()))?;
    let clamped = p < LOG_EPS;
    let p = if p.is_nan() { p } else { p.max(LOG_EPS) };
    Ok((-w * p.ln(), clamped))
}

/// Mean of per-example weighted losses.
pub fn batch_cross_entropy(probs: &Mat, labels: &[usize], weights: &[f64]) -> Result<f64> {
    if probs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape("probabilities and labels disagree".into()));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total += weighted_cross_entropy(probs.row(r), y, weights)?.0;
    }
    Ok(total / labels.len() as f64)
}

/// `w_i = N / (C · count_i)`; a balanced split gives all ones.
pub fn class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::Shape(format!("label {y} outside {classes} classes")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c.to_string()));
    }
    let n = labels.len() as f64;
    Ok(counts
        .into_iter()
        .map(|c| n / (classes as f64 * c as f64))
        .collect())
}

/// Trainable tensors of the whole classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            head: HeadParams::zeros(self.head.d_concat(), self.head.hidden(), self.head.classes()),
        }
    }

    /// Rounds every value to the nearest `f32` so a 32-bit checkpoint is lossless.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

impl Parameters for Params {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = self.encoder.tensors();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }
}

/// The fused classifier: encoder, head and the layout of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder_cfg: EncoderConfig,
    pub head_cfg: HeadConfig,
    pub fusion: FusionSpec,
    pub params: Params,
}

impl Model {
    /// Fresh parameters. `aux_dim` is the width of the non-text inputs.
    pub fn init(
        vocab_size: usize,
        aux_dim: usize,
        classes: usize,
        encoder_cfg: EncoderConfig,
        head_cfg: HeadConfig,
        fusion: FusionSpec,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if !(0.0..1.0).contains(&head_cfg.dropout) {
            return Err(Error::Config("head dropout must lie in [0, 1)".into()));
        }
        let encoder = EncoderParams::init(vocab_size, &encoder_cfg)?;
        let text_dim = if fusion.text { encoder_cfg.d_model } else { 0 };
        let head = HeadParams::init(text_dim + aux_dim, head_cfg.hidden, classes, head_cfg.seed);
        Ok(Self {
            encoder_cfg,
            head_cfg,
            fusion,
            params: Params { encoder, head },
        })
    }

    pub fn classes(&self) -> usize {
        self.params.head.classes()
    }

    fn fused_inputs(
        &self,
        batch: &[&VerseExample],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat, Option<crate::encoder::EncoderCache>)> {
        let aux_dim = batch.first().map_or(0, |e| e.aux.len());
        if batch.iter().any(|e| e.aux.len() != aux_dim) {
            return Err(Error::Shape("examples differ in auxiliary width".into()));
        }
        let (text, cache) = if self.fusion.text {
            let enc = Encoder::new(&self.encoder_cfg, &self.params.encoder)?;
            let seqs: Vec<&TokenSequence> = batch.iter().map(|e| &e.tokens).collect();
            let (cls, cache) = enc.forward(PaddedBatch::new(&seqs), rng)?;
            (Some(cls), Some(cache))
        } else {
            (None, None)
        };
        let text_dim = text.as_ref().map_or(0, Mat::cols);
        let x = Mat::from_fn(batch.len(), text_dim + aux_dim, |r, c| {
            if c < text_dim {
                text.as_ref().unwrap().get(r, c)
            } else {
                batch[r].aux[c - text_dim]
            }
        });
        Ok((x, cache))
    }

    /// Class probabilities with dropout off.
    pub fn predict_proba(&self, batch: &[&VerseExample]) -> Result<Mat> {
        if batch.is_empty() {
            return Ok(Mat::zeros(0, self.classes()));
        }
        let (x, _) = self.fused_inputs(batch, None)?;
        Ok(head_forward(&x, &self.params.head, self.head_cfg.dropout, None)?.0)
    }

    /// Mean weighted cross-entropy of the batch and its gradient. Dropout is
    /// active when `rng` is given.
    pub fn loss_and_grad(
        &self,
        batch: &[&VerseExample],
        weights: &[f64],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Params)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let (x, enc_cache) = self.fused_inputs(batch, rng.as_deref_mut())?;
        let (probs, head_cache) = head_forward(&x, &self.params.head, self.head_cfg.dropout, rng)?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let loss = batch_cross_entropy(&probs, &labels, weights)?;

        let n = batch.len() as f64;
        let mut d_logits = probs;
        for (r, &y) in labels.iter().enumerate() {
            let w = weights[y] / n;
            let row = d_logits.row_mut(r);
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= w);
        }
        let mut grads = self.params.zeros_like();
        let dx = head_backward(&head_cache, &d_logits, &self.params.head, &mut grads.head);
        if let Some(cache) = enc_cache {
            let d = self.encoder_cfg.d_model;
            let d_cls = dx.slice_cols(0, d);
            Encoder::new(&self.encoder_cfg, &self.params.encoder)?.backward(
                &cache,
                &d_cls,
                &mut grads.encoder,
            );
        }
        Ok((loss, grads))
    }
}

/// Mean weighted cross-entropy plus `λ·‖θ‖²` over every trainable tensor.
pub fn total_loss(model: &Model, batch: &[&VerseExample], weights: &[f64], weight_decay: f64) -> Result<f64> {
    let probs = model.predict_proba(batch)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    Ok(batch_cross_entropy(&probs, &labels, weights)? + weight_decay * model.params.sum_sq())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn zero_output_layer_gives_uniform() {
        let mut p = HeadParams::init(6, 8, 4, 1);
        p.w2.fill(0.0);
        let y = forward(&[0.3, -1.0, 2.0, 0.0, 1.0, 5.0], &p, 0.3, false, &mut rng()).unwrap();
        for v in y {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn output_bias_only() {
        let mut p = HeadParams::zeros(2, 3, 3);
        p.b2 = vec![10.0, 0.0, 0.0];
        let y = forward(&[1.0, 1.0], &p, 0.3, false, &mut rng()).unwrap();
        let e = 10f64.exp();
        assert!((y[0] - e / (e + 2.0)).abs() < 1e-12);
        assert!(y[0] > 0.9999);
    }

    #[test]
    fn eval_mode_is_deterministic_and_training_uses_dropout() {
        let p = HeadParams::init(5, 64, 3, 2);
        let x = [0.5, -0.2, 1.0, 0.1, 0.9];
        let a = forward(&x, &p, 0.3, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = forward(&x, &p, 0.3, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let t = forward(&x, &p, 0.3, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(a, t);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let p = HeadParams::init(5, 4, 3, 2);
        assert!(matches!(forward(&[1.0], &p, 0.0, false, &mut rng()), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(weighted_cross_entropy(&[0.0, 1.0], 1, &[3.0, 7.0]).unwrap().0, 0.0);
        let (l, _) = weighted_cross_entropy(&[0.25; 4], 2, &[1.0; 4]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l2, _) = weighted_cross_entropy(&[0.25; 4], 2, &[1.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(l2, 2.0 * l);
        let (lz, clamped) = weighted_cross_entropy(&[1.0, 0.0], 1, &[1.0, 1.0]).unwrap();
        assert!(clamped);
        assert!((lz - (-LOG_EPS.ln())).abs() < 1e-9);
        assert!(weighted_cross_entropy(&[f64::NAN, 0.5], 0, &[1.0, 1.0]).unwrap().0.is_nan());
    }

    #[test]
    fn class_weight_cases() {
        assert_eq!(class_weights(&[0, 1, 0, 1], 2).unwrap(), vec![1.0, 1.0]);
        let mut labels = vec![0; 30];
        labels.extend(vec![1; 10]);
        let w = class_weights(&labels, 2).unwrap();
        assert!((w[0] - 40.0 / 60.0).abs() < 1e-15);
        assert_eq!(w[1], 2.0);
        assert!((30.0 * w[0] - 10.0 * w[1]).abs() < 1e-12);
        assert!(matches!(class_weights(&[0, 0], 2), Err(Error::EmptyClass(_))));
    }

    #[test]
    fn fused_concat_order() {
        let f = FusedInput {
            h_text: vec![1.0],
            h_semantic: vec![2.0],
            h_stylometric: vec![3.0],
            h_form: vec![4.0],
            h_meter: vec![5.0],
        };
        assert_eq!(f.concat(&FusionSpec::default()), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let no_meter = FusionSpec { meter: false, ..Default::default() };
        assert_eq!(f.concat(&no_meter), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
