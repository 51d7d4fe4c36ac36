//! Python bindings: `import divan_py`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use divan::aggregate::{self, ConfidenceMode};
use divan::corpus::{self, Verse};
use divan::embeddings::EmbeddingMatrix;
use divan::metrics;
use divan::model::Checkpoint;
use divan::normalize::{self, NormalizationConfig, Vocabulary};
use divan::pipeline::{run_experiment, Attributor as CoreAttributor, Evaluation, ExperimentConfig};
use divan::split::{self, Ratios, Split};
use divan::synthetic::{self, SyntheticConfig};
use divan::Error;

create_exception!(divan_py, StaleArtifactError, PyValueError);
create_exception!(divan_py, NonFiniteLossError, PyRuntimeError);

fn err(e: Error) -> PyErr {
    match e {
        Error::StaleArtifact { .. } => StaleArtifactError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } => NonFiniteLossError::new_err(e.to_string()),
        Error::Io(_) | Error::CorpusNotFound(_) => pyo3::exceptions::PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn mode(name: &str) -> PyResult<ConfidenceMode> {
    match name {
        "mean" => Ok(ConfidenceMode::Mean),
        "sum" => Ok(ConfidenceMode::Sum),
        other => Err(PyValueError::new_err(format!("confidence mode must be `mean` or `sum`, got `{other}`"))),
    }
}

/// Normalizes Persian text with the default settings.
#[pyfunction]
fn normalize_text(text: &str) -> String {
    normalize::normalize_text(text, &NormalizationConfig::default())
}

/// A validated poem corpus.
#[pyclass(module = "divan_py", frozen)]
struct Corpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        corpus::load_corpus(path).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        corpus::parse_corpus(text).map(|inner| Self { inner }).map_err(err)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn verse_count(&self) -> usize {
        self.inner.verse_count()
    }

    #[getter]
    fn poets(&self) -> Vec<String> {
        self.inner.poet_index().labels().to_vec()
    }

    #[getter]
    fn poem_ids(&self) -> Vec<String> {
        self.inner.records().iter().map(|r| r.poem_id.clone()).collect()
    }

    /// Confirmed poems of poets with at least `min_verses` confirmed verses.
    fn filter(&self, min_verses: usize) -> PyResult<Self> {
        corpus::filter_corpus(&self.inner, min_verses)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Corpus statistics as a dict.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &corpus::corpus_stats(&self.inner).to_json())
    }

    fn stats_text(&self) -> String {
        corpus::corpus_stats(&self.inner).to_text()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus({} poems, {} verses, {} poets)",
            self.inner.len(),
            self.inner.verse_count(),
            self.inner.poet_index().len()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (poets=5, poems_per_poet=200, seed=2024, generic_fraction=0.15))]
fn generate_synthetic(poets: usize, poems_per_poet: usize, seed: u64, generic_fraction: f64) -> PyResult<Corpus> {
    let cfg = SyntheticConfig {
        poets,
        poems_per_poet,
        seed,
        generic_fraction,
        ..Default::default()
    };
    synthetic::generate(&cfg).map(|inner| Corpus { inner }).map_err(err)
}

/// Poem-level stratified split as `(poem_id, split, poet)` rows. The split is
/// checked for leakage before it is returned.
#[pyfunction]
#[pyo3(signature = (corpus, ratios=(0.8, 0.1, 0.1), seed=13))]
fn stratified_split(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> PyResult<Vec<(String, String, String)>> {
    let a = split::stratified_poem_split(&corpus.inner, Ratios([ratios.0, ratios.1, ratios.2]), seed).map_err(err)?;
    split::verify_no_leakage(&a, &corpus.inner).map_err(err)?;
    Ok(a.entries
        .into_iter()
        .map(|e| (e.poem_id, e.split.as_str().to_owned(), e.poet))
        .collect())
}

#[pyfunction]
fn majority_vote(labels: Vec<usize>, max_probs: Vec<f64>) -> PyResult<usize> {
    aggregate::majority_vote(&labels, &max_probs).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (probs, mode="mean"))]
fn weighted_vote(probs: Vec<Vec<f64>>, mode: &str) -> PyResult<(usize, f64)> {
    aggregate::weighted_vote(&probs, self::mode(mode)?).map_err(err)
}

/// `(label, confidence)`; `label` is `None` when the poem is abstained on.
#[pyfunction]
#[pyo3(signature = (probs, tau, mode="mean"))]
fn thresholded_vote(probs: Vec<Vec<f64>>, tau: f64, mode: &str) -> PyResult<(Option<usize>, f64)> {
    aggregate::thresholded_vote(&probs, tau, self::mode(mode)?).map_err(err)
}

/// Per-class precision, recall and F1 with macro averages, as a dict.
#[pyfunction]
fn classification_report<'py>(
    py: Python<'py>,
    preds: Vec<usize>,
    truth: Vec<usize>,
    classes: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let r = metrics::classification_report(&preds, &truth, classes).map_err(err)?;
    json_to_py(py, &r.to_json())
}

/// Reports with abstentions (`None`) counted against coverage.
#[pyfunction]
fn abstention_report<'py>(
    py: Python<'py>,
    preds: Vec<Option<usize>>,
    truth: Vec<usize>,
    classes: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let r = metrics::abstention_report(&preds, &truth, classes).map_err(err)?;
    json_to_py(py, &r.to_json())
}

/// A trained model with its feature artifacts.
#[pyclass(module = "divan_py", frozen)]
struct Attributor {
    inner: CoreAttributor,
    checkpoint: Checkpoint,
    evaluation: Option<Evaluation>,
}

const CHECKPOINT: &str = "model.ckpt";
const VOCAB: &str = "vocab.txt";
const EMBEDDINGS: &str = "embeddings.bin";

#[pymethods]
impl Attributor {
    /// Filters, splits, trains and evaluates on `corpus`. `config` is a JSON
    /// experiment config; missing keys take their defaults.
    #[staticmethod]
    #[pyo3(signature = (corpus, config=None))]
    fn train(py: Python<'_>, corpus: &Corpus, config: Option<&str>) -> PyResult<Self> {
        let cfg: ExperimentConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ExperimentConfig::default(),
        };
        let raw = corpus.inner.clone();
        let run = py.detach(move || run_experiment(&raw, &cfg)).map_err(err)?;
        Ok(Self {
            inner: run.attributor,
            checkpoint: run.checkpoint,
            evaluation: Some(run.evaluation),
        })
    }

    /// Loads `model.ckpt`, `vocab.txt` and `embeddings.bin` from `dir`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let checkpoint = Checkpoint::load(dir.join(CHECKPOINT)).map_err(err)?;
        let vocab = Vocabulary::load(dir.join(VOCAB)).map_err(err)?;
        let emb = EmbeddingMatrix::load(dir.join(EMBEDDINGS)).map_err(err)?;
        let inner = CoreAttributor::new(checkpoint.clone(), vocab, emb).map_err(err)?;
        Ok(Self {
            inner,
            checkpoint,
            evaluation: None,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir)?;
        let f = &self.inner.featurizer;
        self.checkpoint.save(dir.join(CHECKPOINT)).map_err(err)?;
        f.vocab.save(dir.join(VOCAB)).map_err(err)?;
        f.embeddings.save(dir.join(EMBEDDINGS)).map_err(err)
    }

    #[getter]
    fn poets(&self) -> Vec<String> {
        self.inner.poets().labels().to_vec()
    }

    /// Probability per poet and the most likely poet for one verse.
    #[pyo3(signature = (hemistich_1, hemistich_2="", form="unknown", meter="unknown"))]
    fn predict_verse(&self, hemistich_1: &str, hemistich_2: &str, form: &str, meter: &str) -> PyResult<(Vec<f64>, String)> {
        let (probs, label) = self
            .inner
            .predict_verse(&Verse::new(hemistich_1, hemistich_2), form, meter)
            .map_err(err)?;
        Ok((probs, self.inner.poets().labels()[label].clone()))
    }

    /// Per-verse distributions for every poem of `corpus`, keyed by poem id.
    fn score(&self, py: Python<'_>, corpus: &Corpus) -> PyResult<Vec<(String, Vec<Vec<f64>>)>> {
        let scores = py.detach(|| self.inner.score_corpus(&corpus.inner)).map_err(err)?;
        Ok(scores.into_iter().map(|s| (s.poem_id, s.verse_probs)).collect())
    }

    /// Test-split reports keyed by level; empty for a loaded model.
    fn reports<'py>(&self, py: Python<'py>) -> PyResult<Vec<(String, Bound<'py, PyAny>)>> {
        let Some(ev) = &self.evaluation else {
            return Ok(Vec::new());
        };
        ev.reports
            .iter()
            .map(|r| Ok((r.level.as_str().to_owned(), json_to_py(py, &r.to_json())?)))
            .collect()
    }

    /// Test-split `(threshold, accuracy, coverage)` rows; accuracy is `None`
    /// when no poem is covered.
    fn sweep(&self) -> Vec<(f64, Option<f64>, f64)> {
        self.evaluation
            .iter()
            .flat_map(|ev| ev.sweep.iter().map(|r| (r.threshold, r.accuracy, r.coverage)))
            .collect()
    }
}

#[pymodule]
fn divan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Attributor>()?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_split, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_vote, m)?)?;
    m.add_function(wrap_pyfunction!(thresholded_vote, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    m.add_function(wrap_pyfunction!(abstention_report, m)?)?;
    m.add("StaleArtifactError", m.py().get_type::<StaleArtifactError>())?;
    m.add("NonFiniteLossError", m.py().get_type::<NonFiniteLossError>())?;
    m.add("SPLITS", Split::ALL.map(Split::as_str).to_vec())?;
    Ok(())
}
