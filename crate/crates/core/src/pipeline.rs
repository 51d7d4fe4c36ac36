//! End-to-end experiment plumbing: fitting feature artifacts on the training
//! split, building verse examples, training, checkpointing and evaluation.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, ConfidenceMode, PoemPrediction, Strategy, SweepRow, DEFAULT_TAUS};
use crate::corpus::{filter_corpus, Corpus, LabelIndex, Verse};
use crate::embeddings::{train_sgns, verse_semantic_vector, EmbeddingConfig, EmbeddingMatrix};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::{
    build_meter_classes, fit_scaler, one_hot_form, one_hot_meter, stylometric_features, MeterClassMap,
    Scaler, METER_CLASSES, STYLOMETRIC_DIM,
};
use crate::metrics::{abstention_report, classification_report, EvalReport, Level};
use crate::model::{fit, Checkpoint, CheckpointHeader, FusionSpec, HeadConfig, Model, TrainConfig, TrainingLog, VerseExample, FORMAT_VERSION};
use crate::normalize::{build_vocab, tokenize_verse, NormalizationConfig, TokenSequence, Vocabulary, DEFAULT_MAX_LEN};
use crate::split::{stratified_poem_split, verify_no_leakage, LeakageReport, Ratios, Split, SplitAssignment};
use crate::tensor::argmax;

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    pub min_verses: usize,
    pub vocab_min_freq: usize,
    pub max_len: usize,
    pub normalization: NormalizationConfig,
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub fusion: FusionSpec,
    pub train: TrainConfig,
    pub split_seed: u64,
    pub ratios: Ratios,
    pub taus: Vec<f64>,
    /// Threshold used for the thresholded poem-level report.
    pub tau: f64,
    pub confidence: ConfidenceMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            workdir: None,
            min_verses: 50,
            vocab_min_freq: 1,
            max_len: DEFAULT_MAX_LEN,
            normalization: NormalizationConfig::default(),
            embedding: EmbeddingConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            fusion: FusionSpec::default(),
            train: TrainConfig::desk(),
            split_seed: 13,
            ratios: Ratios::default(),
            taus: DEFAULT_TAUS.to_vec(),
            tau: 0.7,
            confidence: ConfidenceMode::Mean,
        }
    }
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialize")
    }
}

/// Feature artifacts fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    pub max_len: usize,
    pub fusion: FusionSpec,
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingMatrix,
    pub scaler: Scaler,
    pub meter_map: MeterClassMap,
    pub form_index: LabelIndex,
    pub poet_index: LabelIndex,
}

/// Content-token sentences of a corpus for embedding training.
pub fn embedding_sentences(c: &Corpus, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Vec<u32>>> {
    c.records()
        .par_iter()
        .flat_map_iter(|r| r.verses.iter())
        .map(|v| tokenize_verse(v, vocab, max_len).map(|t| t.ids().to_vec()))
        .collect()
}

/// Vocabulary and embeddings trained on `train`.
pub fn train_text_artifacts(train: &Corpus, cfg: &ExperimentConfig) -> Result<(Vocabulary, EmbeddingMatrix)> {
    let vocab = build_vocab(train, &cfg.normalization, cfg.vocab_min_freq)?;
    let sentences = embedding_sentences(train, &vocab, cfg.max_len)?;
    let embeddings = train_sgns(&sentences, &vocab, &cfg.embedding)?;
    Ok((vocab, embeddings))
}

impl Featurizer {
    /// Fits the scaler, meter map and form index on `train` around an existing
    /// vocabulary and embedding matrix.
    pub fn fit(
        train: &Corpus,
        poet_index: LabelIndex,
        vocab: Vocabulary,
        embeddings: EmbeddingMatrix,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        if embeddings.vocab_size() != vocab.len() {
            return Err(Error::StaleArtifact {
                name: "embeddings".into(),
                expected: format!("{} rows", vocab.len()),
                found: format!("{} rows", embeddings.vocab_size()),
            });
        }
        let norm = *vocab.config();
        let styl: Vec<_> = train
            .records()
            .par_iter()
            .flat_map_iter(|r| r.verses.iter())
            .map(|v| stylometric_features(v, &norm))
            .collect::<Result<_>>()?;
        Ok(Self {
            max_len: cfg.max_len,
            fusion: cfg.fusion,
            scaler: fit_scaler(&styl)?,
            meter_map: build_meter_classes(train)?,
            form_index: train.form_index().clone(),
            poet_index,
            vocab,
            embeddings,
        })
    }

    pub fn normalization(&self) -> &NormalizationConfig {
        self.vocab.config()
    }

    /// Width of the non-text part of the fused input.
    pub fn aux_dim(&self) -> usize {
        let f = &self.fusion;
        let mut d = 0;
        if f.semantic {
            d += self.embeddings.dim();
        }
        if f.stylometric {
            d += STYLOMETRIC_DIM;
        }
        if f.form {
            d += self.form_index.len() + 1;
        }
        if f.meter {
            d += METER_CLASSES;
        }
        d
    }

    /// Token sequence and semantic ∥ stylometric ∥ form ∥ meter inputs.
    pub fn featurize(&self, v: &Verse, form: &str, meter: &str) -> Result<(TokenSequence, Vec<f64>)> {
        let tokens = tokenize_verse(v, &self.vocab, self.max_len)?;
        let mut aux = Vec::with_capacity(self.aux_dim());
        if self.fusion.semantic {
            aux.extend(verse_semantic_vector(&tokens, &self.embeddings));
        }
        if self.fusion.stylometric {
            let s = stylometric_features(v, self.normalization())?;
            aux.extend(self.scaler.transform(&s.to_array()));
        }
        if self.fusion.form {
            aux.extend(one_hot_form(form, &self.form_index));
        }
        if self.fusion.meter {
            aux.extend(one_hot_meter(meter, &self.meter_map));
        }
        Ok((tokens, aux))
    }

    /// Labelled examples for every verse of `c`, in corpus order.
    pub fn examples(&self, c: &Corpus) -> Result<Vec<VerseExample>> {
        c.records()
            .par_iter()
            .flat_map_iter(|r| r.verses.iter().map(move |v| (r, v)))
            .map(|(r, v)| {
                let label = self
                    .poet_index
                    .id_of(&r.poet)
                    .ok_or_else(|| Error::Invalid(format!("poet `{}` unknown to the model", r.poet)))?;
                let (tokens, aux) = self.featurize(v, &r.form, &r.meter)?;
                Ok(VerseExample { tokens, aux, label })
            })
            .collect()
    }

    pub fn checkpoint(&self, model: Model, train: TrainConfig, log: TrainingLog) -> Checkpoint {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            encoder_config: model.encoder_cfg.clone(),
            head_config: model.head_cfg,
            fusion: model.fusion,
            vocab_size: model.params.encoder.vocab_size(),
            d_concat: model.params.head.d_concat(),
            classes: model.classes(),
            tensors: Checkpoint::manifest(&model),
            normalization: *self.normalization(),
            max_len: self.max_len,
            vocab_hash: self.vocab.hash(),
            embeddings_hash: self.embeddings.hash(),
            scaler_hash: self.scaler.hash(),
            scaler: self.scaler.clone(),
            meter_map_hash: self.meter_map.hash(),
            meter_map: self.meter_map.clone(),
            form_index: self.form_index.clone(),
            poet_index: self.poet_index.clone(),
            train_config: train,
            training_log: log,
        };
        Checkpoint { header, model }
    }
}

/// A loaded model with the artifacts it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Attributor {
    pub featurizer: Featurizer,
    pub model: Model,
}

/// Per-verse distributions of one poem.
#[derive(Debug, Clone, PartialEq)]
pub struct PoemScores {
    pub poem_id: String,
    pub label: Option<usize>,
    pub verse_probs: Vec<Vec<f64>>,
}

const PREDICT_CHUNK: usize = 256;

impl Attributor {
    /// Reassembles an attributor, refusing artifacts whose hashes differ from
    /// those recorded in the checkpoint.
    pub fn new(ckpt: Checkpoint, vocab: Vocabulary, embeddings: EmbeddingMatrix) -> Result<Self> {
        ckpt.verify("vocabulary", &vocab.hash())?;
        ckpt.verify("embeddings", &embeddings.hash())?;
        let h = ckpt.header;
        let featurizer = Featurizer {
            max_len: h.max_len,
            fusion: h.fusion,
            vocab,
            embeddings,
            scaler: h.scaler,
            meter_map: h.meter_map,
            form_index: h.form_index,
            poet_index: h.poet_index,
        };
        if featurizer.aux_dim() + if h.fusion.text { h.encoder_config.d_model } else { 0 } != h.d_concat {
            return Err(Error::Shape("checkpoint input width disagrees with its artifacts".into()));
        }
        Ok(Self { featurizer, model: ckpt.model })
    }

    pub fn from_parts(featurizer: Featurizer, model: Model) -> Self {
        Self { featurizer, model }
    }

    pub fn poets(&self) -> &LabelIndex {
        &self.featurizer.poet_index
    }

    /// Distributions for labelled or unlabelled examples, batched.
    pub fn predict_examples(&self, examples: &[VerseExample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(PREDICT_CHUNK) {
            let refs: Vec<&VerseExample> = chunk.iter().collect();
            let probs = self.model.predict_proba(&refs)?;
            out.extend((0..probs.rows()).map(|r| probs.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Probability distribution over poets and its argmax.
    pub fn predict_verse(&self, v: &Verse, form: &str, meter: &str) -> Result<(Vec<f64>, usize)> {
        let (tokens, aux) = self.featurizer.featurize(v, form, meter)?;
        let ex = VerseExample { tokens, aux, label: 0 };
        let probs = self.predict_examples(std::slice::from_ref(&ex))?.remove(0);
        let label = argmax(&probs);
        Ok((probs, label))
    }

    /// Per-verse distributions grouped by poem. Poets unknown to the model
    /// yield `label: None`.
    pub fn score_corpus(&self, c: &Corpus) -> Result<Vec<PoemScores>> {
        let examples: Vec<VerseExample> = c
            .records()
            .par_iter()
            .flat_map_iter(|r| r.verses.iter().map(move |v| (r, v)))
            .map(|(r, v)| {
                let (tokens, aux) = self.featurizer.featurize(v, &r.form, &r.meter)?;
                Ok(VerseExample { tokens, aux, label: 0 })
            })
            .collect::<Result<_>>()?;
        let mut probs = self.predict_examples(&examples)?.into_iter();
        Ok(c.records()
            .iter()
            .map(|r| PoemScores {
                poem_id: r.poem_id.clone(),
                label: self.poets().id_of(&r.poet),
                verse_probs: probs.by_ref().take(r.verses.len()).collect(),
            })
            .collect())
    }
}

/// Verse-level and all three poem-level reports plus per-poem predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<EvalReport>,
    pub predictions: Vec<PoemPrediction>,
    pub sweep: Vec<SweepRow>,
}

impl Evaluation {
    pub fn report(&self, level: Level) -> &EvalReport {
        self.reports
            .iter()
            .find(|r| r.level == level)
            .expect("all four levels are present")
    }
}

pub fn evaluate_scores(
    scores: &[PoemScores],
    poets: &LabelIndex,
    tau: f64,
    taus: &[f64],
    mode: ConfidenceMode,
) -> Result<Evaluation> {
    let classes = poets.len();
    let labelled: Vec<(&PoemScores, usize)> = scores
        .iter()
        .map(|s| {
            s.label
                .map(|l| (s, l))
                .ok_or_else(|| Error::Invalid(format!("poem `{}` has a poet unknown to the model", s.poem_id)))
        })
        .collect::<Result<_>>()?;
    if labelled.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }

    let (mut vp, mut vt) = (Vec::new(), Vec::new());
    for (s, l) in &labelled {
        for p in &s.verse_probs {
            vp.push(argmax(p));
            vt.push(*l);
        }
    }
    let verse = classification_report(&vp, &vt, classes)?.with_level(Level::Verse);

    let truth: Vec<usize> = labelled.iter().map(|(_, l)| *l).collect();
    let mut predictions = Vec::with_capacity(labelled.len() * 3);
    let mut reports = vec![verse.with_names(poets)];
    for (strategy, level) in [
        (Strategy::Majority, Level::PoemMajority),
        (Strategy::Weighted, Level::PoemWeighted),
        (Strategy::Thresholded, Level::PoemThresholded),
    ] {
        let preds: Vec<PoemPrediction> = labelled
            .iter()
            .map(|(s, _)| aggregate::aggregate_poem(&s.poem_id, &s.verse_probs, strategy, tau, mode))
            .collect::<Result<_>>()?;
        let report = if strategy == Strategy::Thresholded {
            let labels: Vec<Option<usize>> = preds.iter().map(|p| p.label).collect();
            abstention_report(&labels, &truth, classes)?
        } else {
            let labels: Vec<usize> = preds.iter().map(|p| p.label.expect("non-abstaining")).collect();
            classification_report(&labels, &truth, classes)?.with_level(level)
        };
        reports.push(report.with_names(poets));
        predictions.extend(preds);
    }
    let poem_probs: Vec<Vec<Vec<f64>>> = labelled.iter().map(|(s, _)| s.verse_probs.clone()).collect();
    let sweep = aggregate::sweep_thresholds(&poem_probs, &truth, taus, mode)?;
    Ok(Evaluation {
        reports,
        predictions,
        sweep,
    })
}

/// Outputs of [`run_experiment`].
pub struct ExperimentRun {
    pub corpus: Corpus,
    pub split: SplitAssignment,
    pub leakage: LeakageReport,
    pub attributor: Attributor,
    pub checkpoint: Checkpoint,
    pub evaluation: Evaluation,
}

/// Filter, split, fit artifacts on train, train with early stopping on
/// validation, and evaluate on test.
pub fn run_experiment(raw: &Corpus, cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let corpus = filter_corpus(raw, cfg.min_verses)?;
    let split = stratified_poem_split(&corpus, cfg.ratios, cfg.split_seed)?;
    let leakage = verify_no_leakage(&split, &corpus)?;
    let train = split.subset(&corpus, Split::Train)?;
    let valid = split.subset(&corpus, Split::Validation)?;
    let test = split.subset(&corpus, Split::Test)?;

    let (vocab, embeddings) = train_text_artifacts(&train, cfg)?;
    let featurizer = Featurizer::fit(&train, corpus.poet_index().clone(), vocab, embeddings, cfg)?;
    let train_ex = featurizer.examples(&train)?;
    let valid_ex = featurizer.examples(&valid)?;

    let model = Model::init(
        featurizer.vocab.len(),
        featurizer.aux_dim(),
        featurizer.poet_index.len(),
        cfg.encoder.clone(),
        cfg.head,
        cfg.fusion,
    )?;
    let outcome = fit(model, &train_ex, &valid_ex, &cfg.train)?;
    let checkpoint = featurizer.checkpoint(outcome.model.clone(), cfg.train.clone(), outcome.log);
    let attributor = Attributor::from_parts(featurizer, outcome.model);
    let scores = attributor.score_corpus(&test)?;
    let evaluation = evaluate_scores(&scores, attributor.poets(), cfg.tau, &cfg.taus, cfg.confidence)?;
    Ok(ExperimentRun {
        corpus,
        split,
        leakage,
        attributor,
        checkpoint,
        evaluation,
    })
}
