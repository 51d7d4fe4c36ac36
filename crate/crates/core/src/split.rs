//! Poem-level stratified train/validation/test splitting and leakage checks.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios(pub [f64; 3]);

impl Default for Ratios {
    fn default() -> Self {
        Ratios([0.8, 0.1, 0.1])
    }
}

impl Ratios {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|r| !(*r > 0.0)) || (self.0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be positive and sum to 1",
                self.0
            )));
        }
        Ok(())
    }

    /// Parses `a,b,c`.
    pub fn parse(s: &str) -> Result<Ratios> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad ratios `{s}`")))?;
        let arr: [f64; 3] = parts
            .try_into()
            .map_err(|_| Error::Config(format!("expected three ratios, got `{s}`")))?;
        let r = Ratios(arr);
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub poem_id: String,
    pub split: Split,
    pub poet: String,
}

/// Poem-to-split mapping with the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub entries: Vec<Assignment>,
    pub ratios: Ratios,
    pub seed: u64,
    /// Per poet: poem counts in train, validation, test.
    pub counts: BTreeMap<String, [usize; 3]>,
    pub warnings: Vec<String>,
}

/// Largest-remainder apportionment of `n` items over `ratios`; ties in the
/// fractional part go to the earlier split.
pub fn apportion(n: usize, ratios: &Ratios) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.0.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Per-poet split sizes: largest remainder, then every split gets at least one
/// poem when the poet has three or more, taking from the largest split.
/// Poets with fewer poems get one per split in train, validation, test order.
pub fn poet_counts(n: usize, ratios: &Ratios) -> [usize; 3] {
    if n < 3 {
        let mut counts = [0; 3];
        counts.iter_mut().take(n).for_each(|c| *c = 1);
        return counts;
    }
    let mut counts = apportion(n, ratios);
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], usize::MAX - j)).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

pub fn stratified_poem_split(c: &Corpus, ratios: Ratios, seed: u64) -> Result<SplitAssignment> {
    ratios.validate()?;
    let mut by_poet: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in c.records() {
        by_poet.entry(&r.poet).or_default().push(&r.poem_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split_of: HashMap<&str, Split> = HashMap::new();
    let mut counts = BTreeMap::new();
    let mut warnings = Vec::new();
    for (poet, mut poems) in by_poet {
        poems.shuffle(&mut rng);
        let n = poems.len();
        let k = poet_counts(n, &ratios);
        if n < 3 {
            warnings.push(format!(
                "poet `{poet}` has {n} poem(s); not represented in every split"
            ));
        }
        let mut it = poems.into_iter();
        for (s, &take) in Split::ALL.iter().zip(&k) {
            for id in it.by_ref().take(take) {
                split_of.insert(id, *s);
            }
        }
        counts.insert(poet.to_owned(), k);
    }
    let entries = c
        .records()
        .iter()
        .map(|r| Assignment {
            poem_id: r.poem_id.clone(),
            split: split_of[r.poem_id.as_str()],
            poet: r.poet.clone(),
        })
        .collect();
    Ok(SplitAssignment {
        entries,
        ratios,
        seed,
        counts,
        warnings,
    })
}

impl SplitAssignment {
    pub fn split_of(&self, poem_id: &str) -> Option<Split> {
        self.entries
            .iter()
            .find(|e| e.poem_id == poem_id)
            .map(|e| e.split)
    }

    /// Poem ids assigned to `split`.
    pub fn poems_in(&self, split: Split) -> HashSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.poem_id.as_str())
            .collect()
    }

    /// Sub-corpus holding the poems of one split.
    pub fn subset(&self, c: &Corpus, split: Split) -> Result<Corpus> {
        let ids = self.poems_in(split);
        c.retain(|r| ids.contains(r.poem_id.as_str()))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    /// SHA-256 of the CSV serialization.
    pub fn hash(&self) -> String {
        crate::sha256_hex(self.to_csv().as_bytes())
    }

    /// JSON sidecar: seed, ratios, per-poet counts and warnings.
    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "seed": self.seed,
            "ratios": self.ratios.0,
            "counts": self.counts,
            "warnings": self.warnings,
        }))
        .expect("sidecar serialize")
    }

    /// Rebuilds an assignment from its CSV and sidecar.
    pub fn from_csv(csv: &str, sidecar: &str) -> Result<SplitAssignment> {
        #[derive(Deserialize)]
        struct Side {
            seed: u64,
            ratios: [f64; 3],
            #[serde(default)]
            counts: BTreeMap<String, [usize; 3]>,
            #[serde(default)]
            warnings: Vec<String>,
        }
        let side: Side = serde_json::from_str(sidecar)?;
        let entries = csv::Reader::from_reader(csv.as_bytes())
            .deserialize()
            .collect::<std::result::Result<Vec<Assignment>, _>>()
            .map_err(|e| Error::Format(format!("split csv: {e}")))?;
        Ok(SplitAssignment {
            entries,
            ratios: Ratios(side.ratios),
            seed: side.seed,
            counts: side.counts,
            warnings: side.warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub poems: usize,
    pub verses: usize,
    pub violations: usize,
    /// Per poet: poem counts in train, validation, test.
    pub coverage: BTreeMap<String, [usize; 3]>,
    /// Poets missing from at least one split.
    pub incomplete_poets: Vec<String>,
}

/// Every corpus poem must be assigned exactly once and no unknown ids may appear.
pub fn verify_no_leakage(a: &SplitAssignment, c: &Corpus) -> Result<LeakageReport> {
    let mut seen: HashMap<&str, Split> = HashMap::new();
    let mut offenders: Vec<String> = Vec::new();
    for e in &a.entries {
        if let Some(prev) = seen.insert(&e.poem_id, e.split) {
            let _ = prev;
            offenders.push(e.poem_id.clone());
        }
    }
    let known: HashSet<&str> = c.records().iter().map(|r| r.poem_id.as_str()).collect();
    for id in seen.keys() {
        if !known.contains(id) {
            offenders.push(format!("{id} (not in corpus)"));
        }
    }
    for r in c.records() {
        if !seen.contains_key(r.poem_id.as_str()) {
            offenders.push(format!("{} (unassigned)", r.poem_id));
        }
    }
    // Verses are keyed by (poem, position); each must land in exactly one split.
    let mut verse_split: HashMap<(&str, usize), Split> = HashMap::new();
    let mut verses = 0;
    for r in c.records() {
        if let Some(&s) = seen.get(r.poem_id.as_str()) {
            for i in 0..r.verses.len() {
                verses += 1;
                if verse_split.insert((&r.poem_id, i), s).is_some() {
                    offenders.push(format!("{} verse {i}", r.poem_id));
                }
            }
        }
    }
    if !offenders.is_empty() {
        offenders.sort();
        offenders.dedup();
        return Err(Error::Leakage(offenders));
    }
    let mut coverage: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for r in c.records() {
        coverage.entry(r.poet.clone()).or_default()[seen[r.poem_id.as_str()].index()] += 1;
    }
    let incomplete_poets = coverage
        .iter()
        .filter(|(_, k)| k.contains(&0))
        .map(|(p, _)| p.clone())
        .collect();
    Ok(LeakageReport {
        poems: c.len(),
        verses,
        violations: 0,
        coverage,
        incomplete_poets,
    })
}
