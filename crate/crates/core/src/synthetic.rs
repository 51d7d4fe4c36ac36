//! Desk-scale synthetic corpus with known authorship signal.
//!
//! Each poet owns a disjoint vocabulary core and a dominant meter. Ordinary
//! verses mix core and shared words; a fraction of "generic" verses use shared
//! words only, so their author is recoverable from the poem's meter alone.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::corpus::{AttributionStatus, Corpus, PoemRecord, Verse};
use crate::error::{Error, Result};

const LETTERS: &[char] = &[
    'ا', 'ب', 'پ', 'ت', 'ث', 'ج', 'چ', 'ح', 'خ', 'د', 'ذ', 'ر', 'ز', 'ژ', 'س', 'ش', 'ص', 'ض',
    'ط', 'ظ', 'ع', 'غ', 'ف', 'ق', 'ک', 'گ', 'ل', 'م', 'ن', 'و', 'ه', 'ی',
];

const POETS: &[&str] = &[
    "Attar", "Hafez", "Khaqani", "Rumi", "Saadi", "Sanai", "Nezami", "Jami", "Onsori", "Khwaju",
];

const MAIN_METERS: &[&str] = &[
    "hazaj musaddas mahzuf",
    "ramal muthamman mahzuf",
    "mujtathth muthamman makhbun",
    "mutaqarib muthamman mahzuf",
    "muzari akhrab",
    "khafif makhbun",
    "sari matwi",
    "rajaz muthamman",
    "munsarih matwi",
    "kamil muthamman",
];

const RARE_METERS: &[&str] = &["qarib", "jadid", "mushakil", "wafir", "basit", "tawil"];

const FORMS: &[&str] = &["ghazal", "qasida", "masnavi", "qita", "rubai"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub poets: usize,
    pub poems_per_poet: usize,
    pub min_verses: usize,
    pub max_verses: usize,
    /// Words owned by each poet.
    pub core_vocab: usize,
    /// Words available to every poet.
    pub shared_vocab: usize,
    /// Probability that a word of an ordinary verse comes from the shared pool.
    pub shared_fraction: f64,
    /// Probability that a poem uses its poet's dominant meter.
    pub dominant_meter_prob: f64,
    /// Fraction of verses drawn from the shared pool only.
    pub generic_fraction: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            poets: 5,
            poems_per_poet: 200,
            min_verses: 4,
            max_verses: 12,
            core_vocab: 150,
            shared_vocab: 300,
            shared_fraction: 0.5,
            dominant_meter_prob: 0.85,
            generic_fraction: 0.15,
            min_words: 4,
            max_words: 7,
            zipf_exponent: 1.1,
            seed: 2024,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.poets == 0 || self.poets > POETS.len() {
            return bad(&format!("poets must lie in 1..={}", POETS.len()));
        }
        if self.poems_per_poet == 0 || self.min_verses == 0 || self.min_verses > self.max_verses {
            return bad("poem and verse counts must be positive with min ≤ max");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("word counts must be positive with min ≤ max");
        }
        if self.core_vocab == 0 || self.shared_vocab == 0 {
            return bad("vocabulary pools must be non-empty");
        }
        for p in [self.shared_fraction, self.dominant_meter_prob, self.generic_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.zipf_exponent > 0.0) {
            return bad("zipf exponent must be positive");
        }
        Ok(())
    }
}

fn make_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(2..=6);
        let w: String = (0..len).map(|_| LETTERS[rng.random_range(0..LETTERS.len())]).collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Pool {
    words: Vec<String>,
    zipf: Zipf<f64>,
}

impl Pool {
    fn new(words: Vec<String>, s: f64) -> Self {
        let zipf = Zipf::new(words.len() as f64, s).expect("non-empty pool");
        Self { words, zipf }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> &str {
        let rank = self.zipf.sample(rng) as usize;
        &self.words[rank.clamp(1, self.words.len()) - 1]
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = HashSet::new();
    let shared = Pool::new(make_words(&mut rng, cfg.shared_vocab, &mut taken), cfg.zipf_exponent);
    let cores: Vec<Pool> = (0..cfg.poets)
        .map(|_| Pool::new(make_words(&mut rng, cfg.core_vocab, &mut taken), cfg.zipf_exponent))
        .collect();

    let mut records = Vec::with_capacity(cfg.poets * cfg.poems_per_poet);
    for (p, core) in cores.iter().enumerate() {
        for i in 0..cfg.poems_per_poet {
            let meter = if rng.random_bool(cfg.dominant_meter_prob) {
                MAIN_METERS[p]
            } else {
                RARE_METERS[rng.random_range(0..RARE_METERS.len())]
            };
            let form = FORMS[rng.random_range(0..FORMS.len())];
            let n = rng.random_range(cfg.min_verses..=cfg.max_verses);
            let verses = (0..n)
                .map(|_| {
                    let generic = rng.random_bool(cfg.generic_fraction);
                    let hemistich = |rng: &mut ChaCha8Rng| {
                        let k = rng.random_range(cfg.min_words..=cfg.max_words);
                        (0..k)
                            .map(|_| {
                                if generic || rng.random_bool(cfg.shared_fraction) {
                                    shared.draw(rng).to_owned()
                                } else {
                                    core.draw(rng).to_owned()
                                }
                            })
                            .collect::<Vec<_>>()
                            .join(" ")
                    };
                    let h1 = hemistich(&mut rng);
                    let h2 = hemistich(&mut rng);
                    Verse::new(h1, h2)
                })
                .collect();
            records.push(PoemRecord {
                poem_id: format!("syn-{p}-{i:04}"),
                poet: POETS[p].to_owned(),
                title: None,
                form: form.to_owned(),
                meter: meter.to_owned(),
                attribution_status: AttributionStatus::Confirmed,
                verses,
            });
        }
    }
    Corpus::new(records)
}
