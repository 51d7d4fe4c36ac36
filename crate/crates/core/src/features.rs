//! Stylometric measurements, z-score scaling, meter classes and one-hot encodings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::corpus::{Corpus, LabelIndex, Verse};
use crate::error::{Error, Result};
use crate::normalize::{verse_words, NormalizationConfig};
use crate::sha256_hex;

pub const STYLOMETRIC_DIM: usize = 7;
pub const METER_CLASSES: usize = 15;
pub const OTHER_METER: usize = METER_CLASSES - 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StylometricVector {
    pub word_count: f64,
    pub distinct_word_count: f64,
    pub avg_word_length: f64,
    pub hapax_ratio: f64,
    pub mean_hemistich_length: f64,
    pub punctuation_density: f64,
    pub symmetry_ratio: f64,
}

impl StylometricVector {
    pub fn to_array(&self) -> [f64; STYLOMETRIC_DIM] {
        [
            self.word_count,
            self.distinct_word_count,
            self.avg_word_length,
            self.hapax_ratio,
            self.mean_hemistich_length,
            self.punctuation_density,
            self.symmetry_ratio,
        ]
    }
}

/// Unicode `P*` categories; the Persian comma, semicolon and question mark fall in `Po`.
pub fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    ) || matches!(c, '،' | '؛' | '؟')
}

pub fn stylometric_features(v: &Verse, cfg: &NormalizationConfig) -> Result<StylometricVector> {
    let (h1, h2) = verse_words(v, cfg)?;
    let all: Vec<&str> = h1.iter().chain(&h2).map(String::as_str).collect();
    let n = all.len() as f64;

    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &all {
        *freq.entry(w).or_default() += 1;
    }
    let hapax = freq.values().filter(|&&c| c == 1).count() as f64;

    let chars: usize = all.iter().map(|w| w.chars().count()).sum();
    let punct: usize = all
        .iter()
        .flat_map(|w| w.chars())
        .filter(|&c| is_punctuation(c))
        .count();

    Ok(StylometricVector {
        word_count: n,
        distinct_word_count: freq.len() as f64,
        avg_word_length: chars as f64 / n,
        hapax_ratio: hapax / n,
        mean_hemistich_length: (h1.len() + h2.len()) as f64 / 2.0,
        punctuation_density: if chars == 0 { 0.0 } else { punct as f64 / chars as f64 },
        symmetry_ratio: h1.len() as f64 / (h2.len().max(1)) as f64,
    })
}

/// Per-dimension z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions whose fit-set variance was zero; their std is stored as 1.
    pub constant_dims: Vec<usize>,
}

impl Scaler {
    pub fn fit(vectors: &[Vec<f64>]) -> Result<Scaler> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Invalid("cannot fit a scaler on no vectors".into()))?;
        let dim = first.len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("scaler inputs differ in length".into()));
        }
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let mut constant_dims = Vec::new();
        let std = var
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    constant_dims.push(i);
                    1.0
                }
            })
            .collect();
        Ok(Scaler {
            mean,
            std,
            constant_dims,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("scaler serialize").as_bytes())
    }
}

pub fn fit_scaler(vectors: &[StylometricVector]) -> Result<Scaler> {
    let rows: Vec<Vec<f64>> = vectors.iter().map(|v| v.to_array().to_vec()).collect();
    Scaler::fit(&rows)
}

/// Meter string to one of fifteen classes: the fourteen most frequent meters by
/// poem count, then a shared "other" class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterClassMap {
    /// Dedicated meters in class-id order (at most fourteen).
    pub meters: Vec<String>,
}

impl MeterClassMap {
    pub fn class_of(&self, meter: &str) -> usize {
        self.meters
            .iter()
            .position(|m| m == meter)
            .unwrap_or(OTHER_METER)
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("meter map serialize").as_bytes())
    }
}

pub fn build_meter_classes(c: &Corpus) -> Result<MeterClassMap> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in c.records() {
        *counts.entry(r.meter.as_str()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Invalid("corpus has no meters".into()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(MeterClassMap {
        meters: ranked
            .into_iter()
            .take(OTHER_METER)
            .map(|(m, _)| m.to_owned())
            .collect(),
    })
}

/// One-hot over known forms plus a trailing slot for forms unseen in training.
pub fn one_hot_form(form: &str, forms: &LabelIndex) -> Vec<f64> {
    let mut v = vec![0.0; forms.len() + 1];
    v[forms.id_of(form).unwrap_or(forms.len())] = 1.0;
    v
}

pub fn one_hot_meter(meter: &str, map: &MeterClassMap) -> Vec<f64> {
    let mut v = vec![0.0; METER_CLASSES];
    v[map.class_of(meter)] = 1.0;
    v
}
