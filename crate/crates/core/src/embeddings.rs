//! Skip-gram word embeddings trained with negative sampling, and verse mean-pooling.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::{TokenSequence, Vocabulary, RESERVED};
use crate::sha256_hex;

const MAGIC: &[u8; 8] = b"DVNSGNS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Starting learning rate; decays linearly to `lr * 1e-4`.
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            window: 4,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 42,
        }
    }
}

impl EmbeddingConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Input (word) and output (context) vectors, each `vocab_size × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub config: EmbeddingConfig,
    vocab_size: usize,
    input: Vec<f32>,
    output: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Word2vec-style start: small uniform input rows, zero output rows.
    pub fn init(vocab_size: usize, config: &EmbeddingConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let half = 0.5 / d as f32;
        let input = (0..vocab_size * d)
            .map(|_| rng.random_range(-half..half))
            .collect();
        Ok(Self {
            config: config.clone(),
            vocab_size,
            input,
            output: vec![0.0; vocab_size * d],
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn input_vector(&self, id: u32) -> &[f32] {
        let d = self.dim();
        &self.input[id as usize * d..(id as usize + 1) * d]
    }

    pub fn output_vector(&self, id: u32) -> &[f32] {
        let d = self.dim();
        &self.output[id as usize * d..(id as usize + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.input.iter().chain(&self.output).all(|x| x.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config serialize");
        let mut out = Vec::with_capacity(32 + cfg.len() + 8 * self.input.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        for x in self.input.iter().chain(&self.output) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an embedding file".into()));
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |r: &mut &[u8]| -> Result<usize> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word) as usize)
        };
        let vocab_size = next_u64(&mut r)?;
        let dim = next_u64(&mut r)?;
        let cfg_len = next_u64(&mut r)?;
        if r.len() < cfg_len {
            return Err(Error::Format("truncated embedding header".into()));
        }
        let config: EmbeddingConfig = serde_json::from_slice(&r[..cfg_len])?;
        r = &r[cfg_len..];
        if config.dim != dim {
            return Err(Error::Format("embedding header dim disagrees with config".into()));
        }
        let n = vocab_size * dim;
        if r.len() != 2 * n * 4 {
            return Err(Error::Format("embedding payload has the wrong length".into()));
        }
        let mut floats = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let input = floats.by_ref().take(n).collect();
        let output = floats.collect();
        Ok(Self {
            config,
            vocab_size,
            input,
            output,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws negatives from the unigram distribution raised to 0.75.
pub struct NegativeSampler {
    dist: WeightedIndex<f64>,
}

impl NegativeSampler {
    pub fn new(counts: &[u64]) -> Result<Self> {
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|_| Error::Invalid("no content tokens to sample negatives from".into()))?;
        Ok(Self { dist })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        self.dist.sample(rng) as u32
    }
}

/// Content-token frequencies; reserved ids keep a zero count.
pub fn token_counts(sentences: &[Vec<u32>], vocab_size: usize) -> Vec<u64> {
    let mut counts = vec![0u64; vocab_size];
    for s in sentences {
        for &t in s {
            if (t as usize) >= RESERVED && (t as usize) < vocab_size {
                counts[t as usize] += 1;
            }
        }
    }
    counts
}

/// One step on a (center, context) pair and its negatives; returns the pair's loss.
fn sgd_pair(
    m: &mut EmbeddingMatrix,
    center: u32,
    targets: &[(u32, f32)],
    lr: f32,
    grad: &mut [f32],
) -> f64 {
    let d = m.dim();
    let c = center as usize * d;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0f64;
    for &(t, label) in targets {
        let o = t as usize * d;
        let score = dot(&m.input[c..c + d], &m.output[o..o + d]);
        let p = sigmoid(score);
        loss -= if label > 0.5 {
            (p.max(1e-7) as f64).ln()
        } else {
            ((1.0 - p).max(1e-7) as f64).ln()
        };
        let g = (label - p) * lr;
        for k in 0..d {
            grad[k] += g * m.output[o + k];
            m.output[o + k] += g * m.input[c + k];
        }
    }
    for k in 0..d {
        m.input[c + k] += grad[k];
    }
    loss
}

/// Skip-gram with negative sampling over content-token sentences. Reserved ids
/// are skipped. Deterministic for a given config seed.
pub fn train_sgns(
    sentences: &[Vec<u32>],
    vocab: &Vocabulary,
    config: &EmbeddingConfig,
) -> Result<EmbeddingMatrix> {
    let mut m = EmbeddingMatrix::init(vocab.len(), config)?;
    let counts = token_counts(sentences, vocab.len());
    let total_tokens: u64 = counts.iter().sum();
    if total_tokens == 0 {
        return Err(Error::Invalid("embedding corpus has no content tokens".into()));
    }
    let sampler = NegativeSampler::new(&counts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let planned = (total_tokens * config.epochs as u64).max(1) as f64;
    let mut processed = 0u64;
    let mut grad = vec![0.0f32; config.dim];
    let mut targets = Vec::with_capacity(config.negatives + 1);

    for _ in 0..config.epochs {
        for s in sentences {
            let content: Vec<u32> = s
                .iter()
                .copied()
                .filter(|&t| (t as usize) >= RESERVED && (t as usize) < vocab.len())
                .collect();
            for (i, &center) in content.iter().enumerate() {
                let frac = 1.0 - processed as f64 / planned;
                let lr = (config.lr * frac.max(1e-4)) as f32;
                processed += 1;
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window).min(content.len() - 1);
                for (j, &ctx) in content.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    targets.clear();
                    targets.push((ctx, 1.0));
                    for _ in 0..config.negatives {
                        let neg = sampler.sample(&mut rng);
                        if neg != ctx {
                            targets.push((neg, 0.0));
                        }
                    }
                    sgd_pair(&mut m, center, &targets, lr, &mut grad);
                }
            }
        }
    }
    if !m.is_finite() {
        return Err(Error::Invalid("embedding training diverged".into()));
    }
    Ok(m)
}

/// Mean negative-sampling loss over fixed `(center, context, negatives)` triples.
pub fn sgns_loss(m: &EmbeddingMatrix, batch: &[(u32, u32, Vec<u32>)]) -> f64 {
    let mut total = 0.0;
    for (center, ctx, negs) in batch {
        let v = m.input_vector(*center);
        let pos = sigmoid(dot(v, m.output_vector(*ctx))) as f64;
        total -= pos.max(1e-12).ln();
        for n in negs {
            let p = sigmoid(dot(v, m.output_vector(*n))) as f64;
            total -= (1.0 - p).max(1e-12).ln();
        }
    }
    total / batch.len().max(1) as f64
}

/// Mean of the input vectors of content tokens; zero when there are none.
pub fn verse_semantic_vector(t: &TokenSequence, m: &EmbeddingMatrix) -> Vec<f64> {
    let mut out = vec![0.0f64; m.dim()];
    let mut n = 0usize;
    for &id in t.ids() {
        if (id as usize) < RESERVED || id as usize >= m.vocab_size() {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(m.input_vector(id)) {
            *o += x as f64;
        }
        n += 1;
    }
    if n > 0 {
        out.iter_mut().for_each(|o| *o /= n as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AttributionStatus, Corpus, PoemRecord, Verse};
    use crate::normalize::{build_vocab, NormalizationConfig, CLS_ID, UNK_ID};

    fn vocab_for(lines: &[&str]) -> Vocabulary {
        let c = Corpus::new(vec![PoemRecord {
            poem_id: "p".into(),
            poet: "A".into(),
            title: None,
            form: "f".into(),
            meter: "m".into(),
            attribution_status: AttributionStatus::Confirmed,
            verses: lines.iter().map(|l| Verse::new(*l, "")).collect(),
        }])
        .unwrap();
        build_vocab(&c, &NormalizationConfig::default(), 1).unwrap()
    }

    fn ids(v: &Vocabulary, s: &str) -> Vec<u32> {
        s.split_whitespace().map(|w| v.id(w)).collect()
    }

    fn cosine(a: &[f32], b: &[f32]) -> f32 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let v = vocab_for(&["a b c d"]);
        let cfg = EmbeddingConfig {
            dim: 8,
            epochs: 1,
            lr: 0.0,
            ..Default::default()
        };
        let trained = train_sgns(&[ids(&v, "a b c d")], &v, &cfg).unwrap();
        assert_eq!(trained, EmbeddingMatrix::init(v.len(), &cfg).unwrap());
    }

    #[test]
    fn cooccurring_pair_scores_above_random() {
        let line = "a b ".repeat(50);
        let v = vocab_for(&[line.as_str()]);
        let cfg = EmbeddingConfig {
            dim: 16,
            window: 1,
            negatives: 2,
            epochs: 5,
            ..Default::default()
        };
        let m = train_sgns(&[ids(&v, &line)], &v, &cfg).unwrap();
        let a = m.input_vector(v.id("a"));
        let b = m.output_vector(v.id("b"));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let random: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(cosine(a, b) > cosine(a, &random));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let v = vocab_for(&["x y z x y", "z z y"]);
        let s = vec![ids(&v, "x y z x y"), ids(&v, "z z y")];
        let cfg = EmbeddingConfig {
            dim: 12,
            ..Default::default()
        };
        let a = train_sgns(&s, &v, &cfg).unwrap();
        let b = train_sgns(&s, &v, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn invalid_dims_rejected() {
        let v = vocab_for(&["a b"]);
        for cfg in [
            EmbeddingConfig { dim: 0, ..Default::default() },
            EmbeddingConfig { window: 0, ..Default::default() },
        ] {
            assert!(matches!(train_sgns(&[ids(&v, "a b")], &v, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn loss_falls_over_first_epoch() {
        let lines = ["p q r s", "p q t u", "r s t u", "p r q s"];
        let v = vocab_for(&lines);
        let sents: Vec<Vec<u32>> = lines.iter().map(|l| ids(&v, l)).collect();
        let cfg = EmbeddingConfig {
            dim: 10,
            epochs: 1,
            lr: 0.01,
            ..Default::default()
        };
        let batch: Vec<(u32, u32, Vec<u32>)> = vec![
            (v.id("p"), v.id("q"), vec![v.id("u")]),
            (v.id("r"), v.id("s"), vec![v.id("p")]),
            (v.id("t"), v.id("u"), vec![v.id("q")]),
        ];
        let before = sgns_loss(&EmbeddingMatrix::init(v.len(), &cfg).unwrap(), &batch);
        let after = sgns_loss(&train_sgns(&sents, &v, &cfg).unwrap(), &batch);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn binary_round_trip() {
        let v = vocab_for(&["a b c"]);
        let m = train_sgns(&[ids(&v, "a b c")], &v, &EmbeddingConfig { dim: 4, ..Default::default() })
            .unwrap();
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(m, back);
        assert!(EmbeddingMatrix::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn verse_vector_is_mean_of_content_tokens() {
        let v = vocab_for(&["a b"]);
        let m = EmbeddingMatrix::init(v.len(), &EmbeddingConfig { dim: 5, ..Default::default() }).unwrap();
        let (a, b) = (v.id("a"), v.id("b"));
        let one = TokenSequence::new(vec![CLS_ID, a], 64).unwrap();
        let twice = TokenSequence::new(vec![CLS_ID, a, a], 64).unwrap();
        let pair = TokenSequence::new(vec![CLS_ID, b, UNK_ID, a], 64).unwrap();
        let as_f64 = |s: &[f32]| s.iter().map(|&x| x as f64).collect::<Vec<_>>();
        assert_eq!(verse_semantic_vector(&one, &m), as_f64(m.input_vector(a)));
        assert_eq!(verse_semantic_vector(&twice, &m), as_f64(m.input_vector(a)));
        let want: Vec<f64> = m
            .input_vector(a)
            .iter()
            .zip(m.input_vector(b))
            .map(|(x, y)| (*x as f64 + *y as f64) / 2.0)
            .collect();
        let got = verse_semantic_vector(&pair, &m);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        let unk = TokenSequence::new(vec![CLS_ID, UNK_ID], 64).unwrap();
        assert!(verse_semantic_vector(&unk, &m).iter().all(|&x| x == 0.0));
    }
}
