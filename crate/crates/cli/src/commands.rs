use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use divan::aggregate::{aggregate_poem, predictions_csv, sweep_csv, sweep_thresholds, Strategy};
use divan::corpus::{corpus_stats, filter_corpus, load_corpus, parse_corpus, AttributionStatus, Corpus, PoemRecord, Verse};
use divan::embeddings::EmbeddingMatrix;
use divan::metrics::Level;
use divan::model::{fit, Checkpoint, Model};
use divan::normalize::Vocabulary;
use divan::pipeline::{evaluate_scores, train_text_artifacts, Attributor, Featurizer, PoemScores};
use divan::split::{stratified_poem_split, verify_no_leakage, Ratios, Split, SplitAssignment};
use divan::synthetic::{generate, SyntheticConfig};
use divan::{Error, Result};

use crate::config;
use crate::{
    EmbeddingArgs, EvaluateArgs, IngestArgs, PredictArgs, SplitArgs, SweepArgs, SyntheticArgs, TrainArgs,
};

const CORPUS: &str = "corpus.jsonl";
const SPLIT_CSV: &str = "split.csv";
const SPLIT_JSON: &str = "split.json";
const VOCAB: &str = "vocab.txt";
const EMBEDDINGS: &str = "embeddings.bin";
const ARTIFACTS: &str = "artifacts.json";
const CHECKPOINT: &str = "model.ckpt";
const MODEL_PROVENANCE: &str = "model.json";
const REPORTS: &str = "reports";

/// 3 for stale artifacts, 4 for numerical failure, 2 for everything else.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::StaleArtifact { .. } => 3,
        Error::NonFiniteLoss { .. } => 4,
        _ => 2,
    }
}

/// Hashes of the inputs an artifact was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Provenance {
    corpus_hash: String,
    split_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings_hash: Option<String>,
}

impl Provenance {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("{}: {e}; run the previous step first", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Fails with a stale-artifact error when the workdir inputs changed since
    /// this record was written.
    fn check(&self, w: &Workdir) -> Result<()> {
        check_hash("corpus", &self.corpus_hash, &w.corpus.hash())?;
        check_hash("split", &self.split_hash, &w.split.hash())
    }
}

fn check_hash(name: &str, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::StaleArtifact {
            name: name.into(),
            expected: expected.into(),
            found: found.into(),
        })
    }
}

/// Corpus and split loaded from a working directory.
struct Workdir {
    dir: PathBuf,
    corpus: Corpus,
    split: SplitAssignment,
}

impl Workdir {
    fn open(dir: &Path) -> Result<Self> {
        let corpus = load_corpus(dir.join(CORPUS))?;
        let csv = read_artifact(&dir.join(SPLIT_CSV))?;
        let side = read_artifact(&dir.join(SPLIT_JSON))?;
        let split = SplitAssignment::from_csv(&csv, &side)?;
        verify_no_leakage(&split, &corpus)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            corpus,
            split,
        })
    }

    fn subset(&self, s: Split) -> Result<Corpus> {
        self.split.subset(&self.corpus, s)
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            corpus_hash: self.corpus.hash(),
            split_hash: self.split.hash(),
            vocab_hash: None,
            embeddings_hash: None,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn read_artifact(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}; run the previous step first", path.display())))
}

/// Checkpoint plus the vocabulary and embeddings it was trained against.
fn load_attributor(dir: &Path) -> Result<Attributor> {
    let ckpt = Checkpoint::load(dir.join(CHECKPOINT))?;
    let vocab = Vocabulary::load(dir.join(VOCAB))?;
    let emb = EmbeddingMatrix::load(dir.join(EMBEDDINGS))?;
    Attributor::new(ckpt, vocab, emb)
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let raw = load_corpus(&a.corpus)?;
    fs::create_dir_all(&a.out)?;
    let mut cfg = config::resolve(a.common.config.as_deref(), &a.out)?;
    cfg.corpus = Some(a.corpus.clone());
    if let Some(n) = a.min_verses {
        cfg.min_verses = n;
    }
    let corpus = filter_corpus(&raw, cfg.min_verses)?;
    info!(
        "{} poems from {} poets read; {} poems from {} poets kept (≥ {} confirmed verses)",
        raw.len(),
        raw.poet_index().len(),
        corpus.len(),
        corpus.poet_index().len(),
        cfg.min_verses
    );
    corpus.save(a.out.join(CORPUS))?;
    let stats = corpus_stats(&corpus);
    fs::write(a.out.join("stats.json"), stats.to_json())?;
    fs::write(a.out.join("stats.txt"), stats.to_text())?;
    config::persist(&cfg, &a.out)
}

pub fn split(a: SplitArgs) -> Result<()> {
    let (dir, file) = if a.corpus.is_dir() {
        (a.corpus.clone(), a.corpus.join(CORPUS))
    } else {
        let parent = a.corpus.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        (parent.to_path_buf(), a.corpus.clone())
    };
    let out = a.out.unwrap_or(dir);
    let corpus = load_corpus(&file)?;
    let mut cfg = config::resolve(a.common.config.as_deref(), &out)?;
    if let Some(s) = a.seed {
        cfg.split_seed = s;
    }
    if let Some(r) = &a.ratios {
        cfg.ratios = Ratios::parse(r)?;
    }
    let split = stratified_poem_split(&corpus, cfg.ratios, cfg.split_seed)?;
    let report = verify_no_leakage(&split, &corpus)?;
    for w in &split.warnings {
        warn!("{w}");
    }
    info!(
        "leakage check: {} poems, {} verses, {} violations, {} poets missing from a split",
        report.poems,
        report.verses,
        report.violations,
        report.incomplete_poets.len()
    );
    for (poet, k) in &report.coverage {
        info!("  {poet}: train {} / validation {} / test {}", k[0], k[1], k[2]);
    }
    fs::create_dir_all(&out)?;
    if out.join(CORPUS) != file {
        corpus.save(out.join(CORPUS))?;
    }
    fs::write(out.join(SPLIT_CSV), split.to_csv())?;
    fs::write(out.join(SPLIT_JSON), split.sidecar_json())?;
    config::persist(&cfg, &out)
}

pub fn train_embeddings(a: EmbeddingArgs) -> Result<()> {
    let w = Workdir::open(&a.workdir)?;
    let mut cfg = config::resolve(a.common.config.as_deref(), &a.workdir)?;
    config::apply_embedding(&mut cfg, &a);
    let train = w.subset(Split::Train)?;
    info!("training embeddings on {} training verses", train.verse_count());
    let (vocab, emb) = train_text_artifacts(&train, &cfg)?;
    vocab.save(w.path(VOCAB))?;
    emb.save(w.path(EMBEDDINGS))?;
    Provenance {
        vocab_hash: Some(vocab.hash()),
        embeddings_hash: Some(emb.hash()),
        ..w.provenance()
    }
    .write(&w.path(ARTIFACTS))?;
    info!("vocabulary {} tokens, embeddings {}×{}", vocab.len(), emb.vocab_size(), emb.dim());
    config::persist(&cfg, &a.workdir)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let w = Workdir::open(&a.workdir)?;
    let mut cfg = config::resolve(a.common.config.as_deref(), &a.workdir)?;
    config::apply_train(&mut cfg, &a);

    let prov = Provenance::read(&w.path(ARTIFACTS))?;
    prov.check(&w)?;
    let vocab = Vocabulary::load(w.path(VOCAB))?;
    let emb = EmbeddingMatrix::load(w.path(EMBEDDINGS))?;
    check_hash("vocabulary", prov.vocab_hash.as_deref().unwrap_or_default(), &vocab.hash())?;
    check_hash("embeddings", prov.embeddings_hash.as_deref().unwrap_or_default(), &emb.hash())?;

    let train = w.subset(Split::Train)?;
    let valid = w.subset(Split::Validation)?;
    let f = Featurizer::fit(&train, w.corpus.poet_index().clone(), vocab, emb, &cfg)?;
    let train_ex = f.examples(&train)?;
    let valid_ex = f.examples(&valid)?;
    info!("{} training and {} validation verses", train_ex.len(), valid_ex.len());
    let model = Model::init(
        f.vocab.len(),
        f.aux_dim(),
        f.poet_index.len(),
        cfg.encoder.clone(),
        cfg.head,
        cfg.fusion,
    )?;
    let outcome = fit(model, &train_ex, &valid_ex, &cfg.train)?;
    for e in &outcome.log.epochs {
        info!(
            "epoch {}: loss {:.4}, validation accuracy {:.4}",
            e.epoch, e.train_loss, e.valid_accuracy
        );
    }
    info!(
        "best epoch {} (validation accuracy {:.4}){}",
        outcome.log.best_epoch,
        outcome.log.best_valid_accuracy,
        if outcome.log.stopped_early { ", stopped early" } else { "" }
    );
    fs::write(w.path("training_log.csv"), outcome.log.to_csv())?;
    f.checkpoint(outcome.model, cfg.train.clone(), outcome.log)
        .save(w.path(CHECKPOINT))?;
    prov.write(&w.path(MODEL_PROVENANCE))?;
    config::persist(&cfg, &a.workdir)
}

/// Attributor and test-split scores after checking the model still matches
/// the workdir's corpus and split.
fn score_test(w: &Workdir) -> Result<(Attributor, Vec<PoemScores>)> {
    Provenance::read(&w.path(MODEL_PROVENANCE))?.check(w)?;
    let attributor = load_attributor(&w.dir)?;
    let test = w.subset(Split::Test)?;
    let scores = attributor.score_corpus(&test)?;
    Ok((attributor, scores))
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let w = Workdir::open(&a.workdir)?;
    let mut cfg = config::resolve(a.common.config.as_deref(), &a.workdir)?;
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    config::apply_confidence(&mut cfg, a.confidence);
    let (attributor, scores) = score_test(&w)?;
    let eval = evaluate_scores(&scores, attributor.poets(), cfg.tau, &cfg.taus, cfg.confidence)?;
    let dir = w.path(REPORTS);
    fs::create_dir_all(&dir)?;
    for level in Level::ALL {
        let r = eval.report(level);
        fs::write(dir.join(format!("{}.json", level.as_str())), r.to_json())?;
        fs::write(dir.join(format!("{}.txt", level.as_str())), r.to_text())?;
        match r.coverage {
            Some(c) => info!("{}: accuracy {:.4}, coverage {:.4}", level.as_str(), r.accuracy, c),
            None => info!("{}: accuracy {:.4}, macro F1 {:.4}", level.as_str(), r.accuracy, r.macro_f1),
        }
    }
    fs::write(w.path("predictions.csv"), predictions_csv(&eval.predictions, attributor.poets()))?;
    config::persist(&cfg, &a.workdir)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let w = Workdir::open(&a.workdir)?;
    let mut cfg = config::resolve(a.common.config.as_deref(), &a.workdir)?;
    if let Some(t) = &a.taus {
        cfg.taus = config::parse_taus(t)?;
    }
    config::apply_confidence(&mut cfg, a.confidence);
    let (_, scores) = score_test(&w)?;
    let (probs, labels): (Vec<_>, Vec<_>) = scores
        .into_iter()
        .map(|s| {
            s.label
                .map(|l| (s.verse_probs, l))
                .ok_or_else(|| Error::Invalid(format!("poem `{}` has a poet unknown to the model", s.poem_id)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let rows = sweep_thresholds(&probs, &labels, &cfg.taus, cfg.confidence)?;
    for r in &rows {
        let acc = r.accuracy.map_or_else(|| "undefined".to_owned(), |x| format!("{x:.4}"));
        info!("τ = {}: accuracy {acc}, coverage {:.4}", r.threshold, r.coverage);
    }
    fs::write(w.path("sweep.csv"), sweep_csv(&rows))?;
    config::persist(&cfg, &a.workdir)
}

/// Poems from `hemistich<TAB>hemistich` lines; blank lines end a poem.
fn parse_plain(text: &str, form: &str, meter: &str) -> Result<Corpus> {
    let mut poems: Vec<Vec<Verse>> = vec![Vec::new()];
    for line in text.lines() {
        if line.trim().is_empty() {
            if !poems.last().unwrap().is_empty() {
                poems.push(Vec::new());
            }
            continue;
        }
        let (h1, h2) = line.split_once('\t').unwrap_or((line, ""));
        poems.last_mut().unwrap().push(Verse::new(h1.trim(), h2.trim()));
    }
    let records: Vec<PoemRecord> = poems
        .into_iter()
        .filter(|p| !p.is_empty())
        .enumerate()
        .map(|(i, verses)| PoemRecord {
            poem_id: format!("input-{}", i + 1),
            poet: String::new(),
            title: None,
            form: form.to_owned(),
            meter: meter.to_owned(),
            attribution_status: AttributionStatus::Confirmed,
            verses,
        })
        .collect();
    if records.is_empty() {
        return Err(Error::Invalid("no verses in the input".into()));
    }
    Corpus::new(records)
}

fn verse_csv(scores: &[PoemScores], poets: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["poem_id".to_owned(), "verse".to_owned(), "label".to_owned()];
    header.extend(poets.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for s in scores {
        for (i, p) in s.verse_probs.iter().enumerate() {
            let mut row = vec![s.poem_id.clone(), (i + 1).to_string(), poets[divan::tensor::argmax(p)].clone()];
            row.extend(p.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let mut cfg = config::resolve(a.common.config.as_deref(), &a.workdir)?;
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    config::apply_confidence(&mut cfg, a.confidence);
    let attributor = load_attributor(&a.workdir)?;

    let (text, jsonl) = match &a.input {
        Some(p) if p.as_os_str() != "-" => {
            if !p.exists() {
                return Err(Error::Invalid(format!("input {} not found", p.display())));
            }
            (fs::read_to_string(p)?, p.extension().is_some_and(|e| e == "jsonl"))
        }
        _ => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            (s, false)
        }
    };
    let corpus = if jsonl { parse_corpus(&text)? } else { parse_plain(&text, &a.form, &a.meter)? };
    let scores = attributor.score_corpus(&corpus)?;
    let preds = scores
        .iter()
        .flat_map(|s| {
            [Strategy::Majority, Strategy::Weighted, Strategy::Thresholded]
                .map(|st| aggregate_poem(&s.poem_id, &s.verse_probs, st, cfg.tau, cfg.confidence))
        })
        .collect::<Result<Vec<_>>>()?;
    let verses = verse_csv(&scores, attributor.poets().labels())?;
    let poems = predictions_csv(&preds, attributor.poets());
    match &a.out {
        Some(out) => {
            fs::create_dir_all(out)?;
            fs::write(out.join("verse_predictions.csv"), verses)?;
            fs::write(out.join("poem_predictions.csv"), poems)?;
            config::persist(&cfg, out)?;
            info!("{} verses in {} poems attributed", corpus.verse_count(), corpus.len());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            write!(stdout, "{verses}\n{poems}")?;
        }
    }
    Ok(())
}

pub fn make_synthetic(a: SyntheticArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::default();
    if let Some(p) = a.poets {
        cfg.poets = p;
    }
    if let Some(n) = a.poems_per_poet {
        cfg.poems_per_poet = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(g) = a.generic_fraction {
        cfg.generic_fraction = g;
    }
    let corpus = generate(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    corpus.save(&a.out)?;
    info!(
        "{} poems, {} verses, {} poets written to {}",
        corpus.len(),
        corpus.verse_count(),
        corpus.poet_index().len(),
        a.out.display()
    );
    Ok(())
}
