//! Transformer verse encoder with hand-written backpropagation.
//!
//! Each layer is multi-head scaled dot-product self-attention followed by a
//! position-wise feed-forward network, with residual connections and layer
//! normalization (post-norm by default). The verse representation is the
//! final hidden state of the `[CLS]` position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::{TokenSequence, DEFAULT_MAX_LEN, PAD_ID};
use crate::tensor::{matmul, matmul_at, matmul_bt, softmax_in_place, Mat};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Sinusoidal,
    Learned,
    /// No positional signal; self-attention is then permutation-equivariant.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    /// sublayer → residual → normalize
    Post,
    /// normalize → sublayer → residual
    Pre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub positional: Positional,
    pub norm_order: NormOrder,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            max_len: DEFAULT_MAX_LEN,
            dropout: 0.0,
            positional: Positional::Sinusoidal,
            norm_order: NormOrder::Post,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    /// Base-size shape of the pretrained encoder family (768 wide, 12 heads, 12 layers).
    pub fn base() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            d_ff: 3072,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A named view of one parameter tensor.
pub struct Tensor<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

/// Parameter containers expose their tensors in a fixed order so that
/// gradients, optimizer state and checkpoints can line up by position.
pub trait Parameters {
    fn tensors(&self) -> Vec<Tensor<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn sum_sq(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

fn vec_view<'a>(name: String, v: &'a [f64]) -> Tensor<'a> {
    Tensor {
        name,
        shape: (1, v.len()),
        data: v,
    }
}

fn mat_view<'a>(name: String, m: &'a Mat) -> Tensor<'a> {
    Tensor {
        name,
        shape: m.shape(),
        data: m.as_slice(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

impl LayerParams {
    fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            wq: Mat::zeros(d, d),
            bq: vec![0.0; d],
            wk: Mat::zeros(d, d),
            bk: vec![0.0; d],
            wv: Mat::zeros(d, d),
            bv: vec![0.0; d],
            wo: Mat::zeros(d, d),
            bo: vec![0.0; d],
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            w1: Mat::zeros(d, d_ff),
            b1: vec![0.0; d_ff],
            w2: Mat::zeros(d_ff, d),
            b2: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
        }
    }

    fn init(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(d, d_ff);
        for (m, fan_in) in [
            (&mut p.wq, d),
            (&mut p.wk, d),
            (&mut p.wv, d),
            (&mut p.wo, d),
            (&mut p.w1, d),
            (&mut p.w2, d_ff),
        ] {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
            m.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = normal.sample(rng));
        }
        p.ln1_gain.fill(1.0);
        p.ln2_gain.fill(1.0);
        p
    }

    fn tensors(&self, prefix: &str) -> Vec<Tensor<'_>> {
        let n = |s: &str| format!("{prefix}.{s}");
        vec![
            mat_view(n("wq"), &self.wq),
            vec_view(n("bq"), &self.bq),
            mat_view(n("wk"), &self.wk),
            vec_view(n("bk"), &self.bk),
            mat_view(n("wv"), &self.wv),
            vec_view(n("bv"), &self.bv),
            mat_view(n("wo"), &self.wo),
            vec_view(n("bo"), &self.bo),
            vec_view(n("ln1_gain"), &self.ln1_gain),
            vec_view(n("ln1_bias"), &self.ln1_bias),
            mat_view(n("w1"), &self.w1),
            vec_view(n("b1"), &self.b1),
            mat_view(n("w2"), &self.w2),
            vec_view(n("b2"), &self.b2),
            vec_view(n("ln2_gain"), &self.ln2_gain),
            vec_view(n("ln2_bias"), &self.ln2_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.wq.as_mut_slice(),
            &mut self.bq,
            self.wk.as_mut_slice(),
            &mut self.bk,
            self.wv.as_mut_slice(),
            &mut self.bv,
            self.wo.as_mut_slice(),
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Mat,
    /// Present only for learned positional encodings.
    pub positional: Option<Mat>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init(vocab_size: usize, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let token_embedding = Mat::from_fn(vocab_size, d, |_, _| rng.random_range(-0.05..0.05));
        let positional = (cfg.positional == Positional::Learned)
            .then(|| Mat::from_fn(cfg.max_len, d, |_, _| rng.random_range(-0.05..0.05)));
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams::init(d, cfg.d_ff, &mut rng))
            .collect();
        Ok(Self {
            token_embedding,
            positional,
            layers,
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let d = self.d_model();
        Self {
            token_embedding: Mat::zeros(self.token_embedding.rows(), d),
            positional: self.positional.as_ref().map(|p| Mat::zeros(p.rows(), d)),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::zeros(d, l.w1.cols()))
                .collect(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.token_embedding.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.rows()
    }

    /// Checks tensor shapes against a config.
    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        cfg.validate()?;
        let bad = |what: &str| Err(Error::Shape(format!("encoder {what} disagrees with config")));
        if self.d_model() != cfg.d_model {
            return bad("d_model");
        }
        if self.layers.len() != cfg.n_layers {
            return bad("layer count");
        }
        if self.layers.iter().any(|l| l.w1.cols() != cfg.d_ff) {
            return bad("d_ff");
        }
        match (&self.positional, cfg.positional) {
            (Some(p), Positional::Learned) if p.rows() == cfg.max_len => {}
            (None, Positional::Sinusoidal | Positional::None) => {}
            _ => return bad("positional table"),
        }
        Ok(())
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = vec![mat_view("encoder.token_embedding".into(), &self.token_embedding)];
        if let Some(p) = &self.positional {
            out.push(mat_view("encoder.positional".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.tensors(&format!("encoder.layers.{i}")));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.token_embedding.as_mut_slice()];
        if let Some(p) = &mut self.positional {
            out.push(p.as_mut_slice());
        }
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }
}

/// Fixed sine/cosine table: even dims `sin(pos / 10000^(2i/d))`, odd dims the cosine.
pub fn sinusoidal_table(max_len: usize, d: usize) -> Mat {
    Mat::from_fn(max_len, d, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `softmax(QKᵀ/√d_k + mask)·V`. `key_mask[j]` true means key `j` is padding.
/// Returns the output and the attention weights.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, key_mask: &[bool]) -> Result<(Mat, Mat)> {
    let d_k = q.cols();
    if d_k == 0 {
        return Err(Error::Shape("attention with d_k = 0".into()));
    }
    if k.cols() != d_k || k.rows() != v.rows() || key_mask.len() != k.rows() {
        return Err(Error::Shape("attention operands disagree".into()));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut weights = matmul_bt(q, k);
    for r in 0..weights.rows() {
        let row = weights.row_mut(r);
        for (x, &masked) in row.iter_mut().zip(key_mask) {
            *x = if masked { f64::NEG_INFINITY } else { *x * scale };
        }
        softmax_in_place(row);
    }
    Ok((matmul(&weights, v), weights))
}

/// `ReLU(x·W₁ + b₁)·W₂ + b₂`, applied to every row of `x`.
pub fn ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let mut h = matmul(x, w1);
    h.add_row_vector(b1);
    h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = matmul(&h, w2);
    out.add_row_vector(b2);
    out
}

struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, LayerNormCache) {
    let (n, d) = x.shape();
    let mut xhat = Mat::zeros(n, d);
    let mut out = Mat::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(r);
        for (h, v) in xr.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let xr = xhat.row(r).to_vec();
        for ((o, h), (g, b)) in out.row_mut(r).iter_mut().zip(&xr).zip(gain.iter().zip(bias)) {
            *o = h * g + b;
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns dx; accumulates gain and bias gradients.
fn layer_norm_backward(
    dy: &Mat,
    cache: &LayerNormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Mat {
    let (n, d) = dy.shape();
    let mut dx = Mat::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn add_bias_grad(acc: &mut [f64], dy: &Mat) {
    for (a, g) in acc.iter_mut().zip(dy.col_sums()) {
        *a += g;
    }
}

fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut y = matmul(x, w);
    y.add_row_vector(b);
    y
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Mat {
    let keep = 1.0 / (1.0 - p);
    Mat::from_fn(shape.0, shape.1, |_, _| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    })
}

fn apply_mask(x: &mut Mat, mask: &Option<Mat>) {
    if let Some(m) = mask {
        for (v, k) in x.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *v *= k;
        }
    }
}

/// Padded batch of token sequences.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl PaddedBatch {
    /// Pads every sequence with PAD up to the longest one.
    pub fn new(seqs: &[&TokenSequence]) -> Self {
        Self::with_width(seqs, seqs.iter().map(|s| s.len()).max().unwrap_or(0))
    }

    /// Pads to an explicit width, which must cover the longest sequence.
    pub fn with_width(seqs: &[&TokenSequence], width: usize) -> Self {
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            assert!(s.len() <= width, "padding width below sequence length");
            ids.extend_from_slice(s.ids());
            ids.extend(std::iter::repeat_n(PAD_ID, width - s.len()));
            lengths.push(s.len());
        }
        Self { ids, lengths, width }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    fn key_mask(&self, b: usize) -> Vec<bool> {
        (0..self.width).map(|t| t >= self.lengths[b]).collect()
    }
}

struct LayerCache {
    ln1: Option<LayerNormCache>,
    attn_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// One weight matrix per (sequence, head).
    weights: Vec<Mat>,
    concat: Mat,
    attn_mask: Option<Mat>,
    ln_mid: LayerNormCache,
    ffn_in: Mat,
    hidden_pre: Mat,
    hidden: Mat,
    ffn_mask: Option<Mat>,
    ln_out: Option<LayerNormCache>,
}

pub struct EncoderCache {
    batch: PaddedBatch,
    layers: Vec<LayerCache>,
    output: Mat,
}

/// Encoder bound to its configuration.
pub struct Encoder<'a> {
    pub cfg: &'a EncoderConfig,
    pub params: &'a EncoderParams,
    sinusoid: Option<Mat>,
}

impl<'a> Encoder<'a> {
    pub fn new(cfg: &'a EncoderConfig, params: &'a EncoderParams) -> Result<Self> {
        params.check(cfg)?;
        let sinusoid = (cfg.positional == Positional::Sinusoidal)
            .then(|| sinusoidal_table(cfg.max_len, cfg.d_model));
        Ok(Self {
            cfg,
            params,
            sinusoid,
        })
    }

    fn embed(&self, batch: &PaddedBatch) -> Result<Mat> {
        let d = self.cfg.d_model;
        if batch.width > self.cfg.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds max_len {}",
                batch.width, self.cfg.max_len
            )));
        }
        let v = self.params.vocab_size();
        let mut x = Mat::zeros(batch.ids.len(), d);
        for (r, &id) in batch.ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::Invalid(format!("token id {id} outside vocabulary of {v}")));
            }
            let t = r % batch.width;
            let row = x.row_mut(r);
            row.copy_from_slice(self.params.token_embedding.row(id as usize));
            let table = self.sinusoid.as_ref().or(self.params.positional.as_ref());
            if let Some(p) = table {
                for (o, pv) in row.iter_mut().zip(p.row(t)) {
                    *o += pv;
                }
            }
        }
        Ok(x)
    }

    fn attend(&self, lp: &LayerParams, x: &Mat, batch: &PaddedBatch) -> Result<(Mat, Vec<Mat>, Mat, Mat, Mat)> {
        let h = self.cfg.n_heads;
        let dk = self.cfg.head_dim();
        let q = linear(x, &lp.wq, &lp.bq);
        let k = linear(x, &lp.wk, &lp.bk);
        let v = linear(x, &lp.wv, &lp.bv);
        let mut concat = Mat::zeros(x.rows(), self.cfg.d_model);
        let mut weights = Vec::with_capacity(batch.batch_size() * h);
        let w = batch.width;
        for b in 0..batch.batch_size() {
            let mask = batch.key_mask(b);
            let (qb, kb, vb) = (q.slice_rows(b * w, w), k.slice_rows(b * w, w), v.slice_rows(b * w, w));
            for head in 0..h {
                let (out, wts) = attention(
                    &qb.slice_cols(head * dk, dk),
                    &kb.slice_cols(head * dk, dk),
                    &vb.slice_cols(head * dk, dk),
                    &mask,
                )?;
                for t in 0..w {
                    concat.row_mut(b * w + t)[head * dk..(head + 1) * dk]
                        .copy_from_slice(out.row(t));
                }
                weights.push(wts);
            }
        }
        Ok((concat, weights, q, k, v))
    }

    /// Runs the encoder and returns the `[CLS]` hidden state of each sequence
    /// (`batch × d_model`). Dropout is active only when `rng` is given and the
    /// configured rate is positive.
    pub fn forward(
        &self,
        batch: PaddedBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat, EncoderCache)> {
        let pre = self.cfg.norm_order == NormOrder::Pre;
        let p = self.cfg.dropout;
        let mut x = self.embed(&batch)?;
        let mut caches = Vec::with_capacity(self.params.layers.len());
        for lp in &self.params.layers {
            let input = x;
            let (attn_in, ln1) = if pre {
                let (y, c) = layer_norm(&input, &lp.ln1_gain, &lp.ln1_bias);
                (y, Some(c))
            } else {
                (input.clone(), None)
            };
            let (concat, weights, q, k, v) = self.attend(lp, &attn_in, &batch)?;
            let mut z = linear(&concat, &lp.wo, &lp.bo);
            let attn_mask = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some(dropout_mask(z.shape(), p, r)),
                _ => None,
            };
            apply_mask(&mut z, &attn_mask);
            z.add_assign(&input);
            // Post: y1 = LN1(x + z). Pre: y1 = x + z and LN2 feeds the FFN.
            let (y1, ln_mid, ffn_in) = if pre {
                let (n, c) = layer_norm(&z, &lp.ln2_gain, &lp.ln2_bias);
                (z, c, n)
            } else {
                let (n, c) = layer_norm(&z, &lp.ln1_gain, &lp.ln1_bias);
                (n.clone(), c, n)
            };
            let hidden_pre = linear(&ffn_in, &lp.w1, &lp.b1);
            let mut hidden = hidden_pre.clone();
            hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            let mut f = linear(&hidden, &lp.w2, &lp.b2);
            let ffn_mask = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some(dropout_mask(f.shape(), p, r)),
                _ => None,
            };
            apply_mask(&mut f, &ffn_mask);
            f.add_assign(&y1);
            let (out, ln_out) = if pre {
                (f, None)
            } else {
                let (n, c) = layer_norm(&f, &lp.ln2_gain, &lp.ln2_bias);
                (n, Some(c))
            };
            caches.push(LayerCache {
                ln1,
                attn_in,
                q,
                k,
                v,
                weights,
                concat,
                attn_mask,
                ln_mid,
                ffn_in,
                hidden_pre,
                hidden,
                ffn_mask,
                ln_out,
            });
            x = out;
        }
        let w = batch.width;
        let cls = Mat::from_fn(batch.batch_size(), self.cfg.d_model, |b, j| x.get(b * w, j));
        Ok((
            cls,
            EncoderCache {
                batch,
                layers: caches,
                output: x,
            },
        ))
    }

    /// Backpropagates `d_cls` (`batch × d_model`) and accumulates into `grads`.
    pub fn backward(&self, cache: &EncoderCache, d_cls: &Mat, grads: &mut EncoderParams) {
        let pre = self.cfg.norm_order == NormOrder::Pre;
        let batch = &cache.batch;
        let w = batch.width;
        let d = self.cfg.d_model;
        let dk = self.cfg.head_dim();
        let h = self.cfg.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut dx = Mat::zeros(batch.ids.len(), d);
        for b in 0..batch.batch_size() {
            dx.row_mut(b * w).copy_from_slice(d_cls.row(b));
        }

        for (li, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &self.params.layers[li];
            let g = &mut grads.layers[li];

            // Feed-forward half.
            let mut d_res2 = match &lc.ln_out {
                Some(c) => layer_norm_backward(&dx, c, &lp.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias),
                None => dx,
            };
            let mut d_f = d_res2.clone();
            apply_mask(&mut d_f, &lc.ffn_mask);
            g.w2.add_assign(&matmul_at(&lc.hidden, &d_f));
            add_bias_grad(&mut g.b2, &d_f);
            let mut d_hidden = matmul_bt(&d_f, &lp.w2);
            for (dh, hp) in d_hidden.as_mut_slice().iter_mut().zip(lc.hidden_pre.as_slice()) {
                if *hp <= 0.0 {
                    *dh = 0.0;
                }
            }
            g.w1.add_assign(&matmul_at(&lc.ffn_in, &d_hidden));
            add_bias_grad(&mut g.b1, &d_hidden);
            let d_ffn_in = matmul_bt(&d_hidden, &lp.w1);

            // Gradient reaching y1 (post: LN1 output; pre: residual sum).
            let d_y1 = if pre {
                d_res2.add_assign(&layer_norm_backward(
                    &d_ffn_in,
                    &lc.ln_mid,
                    &lp.ln2_gain,
                    &mut g.ln2_gain,
                    &mut g.ln2_bias,
                ));
                d_res2
            } else {
                d_res2.add_assign(&d_ffn_in);
                layer_norm_backward(&d_res2, &lc.ln_mid, &lp.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias)
            };

            // Attention half; d_y1 is now the gradient of (input + z).
            let mut d_input = d_y1.clone();
            let mut d_z = d_y1;
            apply_mask(&mut d_z, &lc.attn_mask);
            g.wo.add_assign(&matmul_at(&lc.concat, &d_z));
            add_bias_grad(&mut g.bo, &d_z);
            let d_concat = matmul_bt(&d_z, &lp.wo);

            let n = batch.ids.len();
            let mut dq = Mat::zeros(n, d);
            let mut dkm = Mat::zeros(n, d);
            let mut dv = Mat::zeros(n, d);
            for b in 0..batch.batch_size() {
                for head in 0..h {
                    let wts = &lc.weights[b * h + head];
                    let cols = head * dk..(head + 1) * dk;
                    let sub = |m: &Mat| Mat::from_fn(w, dk, |t, j| m.get(b * w + t, head * dk + j));
                    let (qh, kh, vh, doh) = (sub(&lc.q), sub(&lc.k), sub(&lc.v), sub(&d_concat));
                    let dp = matmul_bt(&doh, &vh);
                    let dvh = matmul_at(wts, &doh);
                    let mut ds = Mat::zeros(w, w);
                    for t in 0..w {
                        let pr = wts.row(t);
                        let dpr = dp.row(t);
                        let inner: f64 = pr.iter().zip(dpr).map(|(a, c)| a * c).sum();
                        for (j, o) in ds.row_mut(t).iter_mut().enumerate() {
                            *o = pr[j] * (dpr[j] - inner) * scale;
                        }
                    }
                    let dqh = matmul(&ds, &kh);
                    let dkh = matmul_at(&ds, &qh);
                    for t in 0..w {
                        let r = b * w + t;
                        dq.row_mut(r)[cols.clone()].copy_from_slice(dqh.row(t));
                        dkm.row_mut(r)[cols.clone()].copy_from_slice(dkh.row(t));
                        dv.row_mut(r)[cols.clone()].copy_from_slice(dvh.row(t));
                    }
                }
            }
            let mut d_attn_in = Mat::zeros(n, d);
            for (dm, wm, gw, gb) in [
                (&dq, &lp.wq, &mut g.wq, &mut g.bq),
                (&dkm, &lp.wk, &mut g.wk, &mut g.bk),
                (&dv, &lp.wv, &mut g.wv, &mut g.bv),
            ] {
                gw.add_assign(&matmul_at(&lc.attn_in, dm));
                add_bias_grad(gb, dm);
                d_attn_in.add_assign(&matmul_bt(dm, wm));
            }
            match &lc.ln1 {
                Some(c) => d_input.add_assign(&layer_norm_backward(
                    &d_attn_in,
                    c,
                    &lp.ln1_gain,
                    &mut g.ln1_gain,
                    &mut g.ln1_bias,
                )),
                None => d_input.add_assign(&d_attn_in),
            }
            dx = d_input;
        }

        for (r, &id) in batch.ids.iter().enumerate() {
            let t = r % w;
            if t >= batch.lengths[r / w] {
                continue;
            }
            let drow = dx.row(r);
            for (a, v) in grads.token_embedding.row_mut(id as usize).iter_mut().zip(drow) {
                *a += v;
            }
            if let Some(p) = &mut grads.positional {
                for (a, v) in p.row_mut(t).iter_mut().zip(drow) {
                    *a += v;
                }
            }
        }
    }

    /// Final-layer hidden states of every position of one sequence (`len × d_model`).
    pub fn hidden_states(&self, t: &TokenSequence) -> Result<Mat> {
        let (_, cache) = self.forward(PaddedBatch::new(&[t]), None)?;
        Ok(cache.output)
    }
}

/// `[CLS]` representation of a single verse.
pub fn encode_verse(t: &TokenSequence, params: &EncoderParams, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    if t.len() > cfg.max_len {
        return Err(Error::Invalid(format!(
            "sequence length {} exceeds max_len {}",
            t.len(),
            cfg.max_len
        )));
    }
    let enc = Encoder::new(cfg, params)?;
    let (cls, _) = enc.forward(PaddedBatch::new(&[t]), None)?;
    Ok(cls.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::CLS_ID;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_len: 16,
            ..Default::default()
        }
    }

    #[test]
    fn singleton_attention_returns_its_value() {
        let q = Mat::from_vec(1, 2, vec![0.3, -1.0]);
        let k = Mat::from_vec(1, 2, vec![2.0, 0.5]);
        let v = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let (out, w) = attention(&q, &k, &v, &[false]).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
        assert_eq!(out.as_slice(), v.as_slice());
    }

    #[test]
    fn equal_logits_average_unmasked_values() {
        let q = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let k = Mat::from_vec(3, 2, vec![1.0, 2.0, -3.0, 0.5, 4.0, 4.0]);
        let v = Mat::from_vec(3, 1, vec![1.0, 5.0, 100.0]);
        let (out, _) = attention(&q, &k, &v, &[false, false, true]).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_token_attention_by_hand() {
        // d_k = 2, scale 1/√2.
        let q = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let k = Mat::from_vec(2, 2, vec![1.0, 1.0, 0.0, 2.0]);
        let v = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let s = 1.0 / 2f64.sqrt();
        // Row 0 logits: [1, 0]·s. Row 1 logits: [1, 2]·s.
        let row = |a: f64, b: f64| {
            let (ea, eb) = ((a * s).exp(), (b * s).exp());
            [ea / (ea + eb), eb / (ea + eb)]
        };
        let want = [row(1.0, 0.0), row(1.0, 2.0)];
        let (out, _) = attention(&q, &k, &v, &[false, false]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.get(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_width_keys_rejected() {
        let z = Mat::zeros(2, 0);
        assert!(attention(&z, &z, &Mat::zeros(2, 1), &[false, false]).is_err());
    }

    #[test]
    fn ffn_constant_and_relu_cases() {
        let x = Mat::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]);
        let c = vec![4.0, -1.0];
        let out = ffn(&x, &Mat::zeros(3, 5), &[0.0; 5], &Mat::zeros(5, 2), &c);
        assert_eq!(out.row(0), c.as_slice());
        assert_eq!(out.row(1), c.as_slice());
        let w1 = Mat::from_fn(3, 2, |_, _| 1.0);
        let w2 = Mat::from_fn(2, 2, |_, _| 3.0);
        let neg = Mat::from_vec(1, 3, vec![-1.0, -1.0, -1.0]);
        assert_eq!(ffn(&neg, &w1, &[0.0, 0.0], &w2, &c).row(0), c.as_slice());
    }

    #[test]
    fn no_layers_returns_cls_embedding_plus_position() {
        let cfg = EncoderConfig {
            n_layers: 0,
            ..small_cfg()
        };
        let p = EncoderParams::init(10, &cfg).unwrap();
        let t = TokenSequence::new(vec![CLS_ID, 5, 6], 16).unwrap();
        let out = encode_verse(&t, &p, &cfg).unwrap();
        let pe = sinusoidal_table(16, 8);
        for j in 0..8 {
            assert_eq!(out[j], p.token_embedding.get(CLS_ID as usize, j) + pe.get(0, j));
        }
    }

    #[test]
    fn padding_does_not_change_output() {
        let cfg = small_cfg();
        let p = EncoderParams::init(12, &cfg).unwrap();
        let t = TokenSequence::new(vec![CLS_ID, 4, 9, 7], 16).unwrap();
        let enc = Encoder::new(&cfg, &p).unwrap();
        let (a, _) = enc.forward(PaddedBatch::with_width(&[&t], 4), None).unwrap();
        let (b, _) = enc.forward(PaddedBatch::with_width(&[&t], 9), None).unwrap();
        let (c, _) = enc.forward(PaddedBatch::with_width(&[&t], 16), None).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(0), c.row(0));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = small_cfg();
        let t = TokenSequence::new(vec![CLS_ID, 3, 4], 16).unwrap();
        let a = encode_verse(&t, &EncoderParams::init(6, &cfg).unwrap(), &cfg).unwrap();
        let b = encode_verse(&t, &EncoderParams::init(6, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlong_sequence_rejected() {
        let cfg = EncoderConfig { max_len: 2, ..small_cfg() };
        let p = EncoderParams::init(6, &cfg).unwrap();
        let t = TokenSequence::new(vec![CLS_ID, 3, 4], 16).unwrap();
        assert!(encode_verse(&t, &p, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { d_model: 10, n_heads: 3, ..small_cfg() }.validate().is_err());
        assert!(EncoderConfig { dropout: 1.0, ..small_cfg() }.validate().is_err());
        assert!(EncoderConfig::base().validate().is_ok());
    }
}
