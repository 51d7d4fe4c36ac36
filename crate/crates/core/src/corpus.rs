//! Poem corpus: loading from line-delimited JSON, filtering, and summary statistics.
//!
//! Each line of a corpus file is one object:
//!
//! ```text
//! {"poem_id": "hafez-0001", "poet": "Hafez", "title": "...", "form": "ghazal",
//!  "meter": "mafʿūlu ...", "status": "confirmed", "verses": [["h1", "h2"], ...]}
//! ```
//!
//! A verse given as a one-element list keeps an empty second hemistich.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionStatus {
    Confirmed,
    Contested,
    Anonymous,
    Ambiguous,
}

impl AttributionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Confirmed => "confirmed",
            Self::Contested => "contested",
            Self::Anonymous => "anonymous",
            Self::Ambiguous => "ambiguous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "confirmed" => Self::Confirmed,
            "contested" => Self::Contested,
            "anonymous" => Self::Anonymous,
            "ambiguous" => Self::Ambiguous,
            _ => return None,
        })
    }
}

/// One beyt: two hemistichs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Verse {
    pub hemistich_1: String,
    pub hemistich_2: String,
}

impl Verse {
    pub fn new(h1: impl Into<String>, h2: impl Into<String>) -> Self {
        Self {
            hemistich_1: h1.into(),
            hemistich_2: h2.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoemRecord {
    pub poem_id: String,
    pub poet: String,
    pub title: Option<String>,
    pub form: String,
    pub meter: String,
    pub attribution_status: AttributionStatus,
    pub verses: Vec<Verse>,
}

/// Dense bijection between string labels and `0..len`, ordered lexicographically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelIndex {
    labels: Vec<String>,
}

impl LabelIndex {
    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = values.into_iter().collect();
        Self {
            labels: set.into_iter().map(str::to_owned).collect(),
        }
    }

    pub fn from_labels(labels: Vec<String>) -> Self {
        Self { labels }
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<PoemRecord>,
    poet_index: LabelIndex,
    form_index: LabelIndex,
    meter_index: LabelIndex,
}

impl Corpus {
    /// Validates records and builds the label indices. Record order is kept.
    pub fn new(records: Vec<PoemRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.poem_id.as_str()) {
                return Err(Error::DuplicatePoem(r.poem_id.clone()));
            }
            if r.verses.is_empty() {
                return Err(Error::Invalid(format!("poem `{}` has no verses", r.poem_id)));
            }
            if r.verses.iter().any(|v| v.hemistich_1.trim().is_empty()) {
                return Err(Error::Invalid(format!(
                    "poem `{}` has a verse with an empty first hemistich",
                    r.poem_id
                )));
            }
        }
        let poet_index = LabelIndex::from_values(records.iter().map(|r| r.poet.as_str()));
        let form_index = LabelIndex::from_values(records.iter().map(|r| r.form.as_str()));
        let meter_index = LabelIndex::from_values(records.iter().map(|r| r.meter.as_str()));
        Ok(Self {
            records,
            poet_index,
            form_index,
            meter_index,
        })
    }

    pub fn records(&self) -> &[PoemRecord] {
        &self.records
    }

    pub fn poet_index(&self) -> &LabelIndex {
        &self.poet_index
    }

    pub fn form_index(&self) -> &LabelIndex {
        &self.form_index
    }

    pub fn meter_index(&self) -> &LabelIndex {
        &self.meter_index
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn verse_count(&self) -> usize {
        self.records.iter().map(|r| r.verses.len()).sum()
    }

    pub fn get(&self, poem_id: &str) -> Option<&PoemRecord> {
        self.records.iter().find(|r| r.poem_id == poem_id)
    }

    /// Verse totals keyed by poet label.
    pub fn verses_per_poet(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.poet.clone()).or_default() += r.verses.len();
        }
        out
    }

    /// A corpus holding the subset of records the predicate keeps.
    pub fn retain(&self, mut keep: impl FnMut(&PoemRecord) -> bool) -> Result<Corpus> {
        Corpus::new(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&record_to_json(r).to_string());
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the JSON Lines serialization.
    pub fn hash(&self) -> String {
        crate::sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

fn record_to_json(r: &PoemRecord) -> Value {
    let verses: Vec<Value> = r
        .verses
        .iter()
        .map(|v| json!([v.hemistich_1, v.hemistich_2]))
        .collect();
    json!({
        "poem_id": r.poem_id,
        "poet": r.poet,
        "title": r.title,
        "form": r.form,
        "meter": r.meter,
        "status": r.attribution_status.as_str(),
        "verses": verses,
    })
}

fn parse_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.to_owned(),
        message: message.into(),
    }
}

fn required_str(obj: &serde_json::Map<String, Value>, line: usize, field: &str) -> Result<String> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(parse_err(line, field, "missing")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(parse_err(line, field, "expected a string")),
    }
}

fn parse_record(text: &str, line: usize) -> Result<PoemRecord> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| parse_err(line, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(line, "<record>", "expected a JSON object"))?;

    let poem_id = required_str(obj, line, "poem_id")?;
    let poet = required_str(obj, line, "poet")?;
    let form = required_str(obj, line, "form")?;
    let meter = required_str(obj, line, "meter")?;
    let status = required_str(obj, line, "status")?;
    let attribution_status = AttributionStatus::parse(&status)
        .ok_or_else(|| parse_err(line, "status", format!("unknown status `{status}`")))?;
    let title = match obj.get("title") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(parse_err(line, "title", "expected a string")),
    };

    let raw_verses = obj
        .get("verses")
        .ok_or_else(|| parse_err(line, "verses", "missing"))?
        .as_array()
        .ok_or_else(|| parse_err(line, "verses", "expected a list"))?;
    if raw_verses.is_empty() {
        return Err(parse_err(line, "verses", "no verses"));
    }
    let mut verses = Vec::with_capacity(raw_verses.len());
    for (i, rv) in raw_verses.iter().enumerate() {
        let parts = rv
            .as_array()
            .filter(|p| (1..=2).contains(&p.len()))
            .ok_or_else(|| parse_err(line, "verses", format!("verse {i}: expected [h1, h2]")))?;
        let mut hs = parts.iter().map(|p| {
            p.as_str()
                .map(str::to_owned)
                .ok_or_else(|| parse_err(line, "verses", format!("verse {i}: expected strings")))
        });
        let h1 = hs.next().unwrap()?;
        let h2 = hs.next().transpose()?.unwrap_or_default();
        if h1.trim().is_empty() {
            return Err(parse_err(line, "verses", format!("verse {i}: empty first hemistich")));
        }
        verses.push(Verse::new(h1, h2));
    }

    Ok(PoemRecord {
        poem_id,
        poet,
        title,
        form,
        meter,
        attribution_status,
        verses,
    })
}

/// Parses corpus text. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(line, i + 1)?;
        if !ids.insert(rec.poem_id.clone()) {
            return Err(Error::DuplicatePoem(rec.poem_id));
        }
        records.push(rec);
    }
    Corpus::new(records)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::CorpusNotFound(path.to_path_buf()));
    }
    parse_corpus(&std::fs::read_to_string(path)?)
}

/// Keeps confirmed attributions from poets with at least `min_verses_per_poet`
/// confirmed verses.
pub fn filter_corpus(c: &Corpus, min_verses_per_poet: usize) -> Result<Corpus> {
    let mut confirmed_verses: BTreeMap<&str, usize> = BTreeMap::new();
    for r in c.records() {
        if r.attribution_status == AttributionStatus::Confirmed {
            *confirmed_verses.entry(r.poet.as_str()).or_default() += r.verses.len();
        }
    }
    let keep: HashSet<&str> = confirmed_verses
        .into_iter()
        .filter(|&(_, n)| n >= min_verses_per_poet)
        .map(|(p, _)| p)
        .collect();
    let records: Vec<PoemRecord> = c
        .records()
        .iter()
        .filter(|r| {
            r.attribution_status == AttributionStatus::Confirmed && keep.contains(r.poet.as_str())
        })
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(Error::NothingSurvives);
    }
    Corpus::new(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary {
                count: 0,
                mean: 0.0,
                median: 0.0,
                min: 0.0,
                max: 0.0,
                std: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 0 {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        } else {
            sorted[mid]
        };
        Summary {
            count: values.len(),
            mean,
            median,
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub poems: usize,
    pub verses: usize,
    pub poets: usize,
    pub poems_per_poet: BTreeMap<String, usize>,
    pub verses_per_poet: BTreeMap<String, usize>,
    pub verses_per_poem: Summary,
    pub form_distribution: BTreeMap<String, usize>,
    pub meter_distribution: BTreeMap<String, usize>,
    /// Number of distinct meters each poet used.
    pub meters_per_poet: BTreeMap<String, usize>,
}

pub fn corpus_stats(c: &Corpus) -> StatsReport {
    let mut poems_per_poet = BTreeMap::new();
    let mut form_distribution = BTreeMap::new();
    let mut meter_distribution = BTreeMap::new();
    let mut meter_sets: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for r in c.records() {
        *poems_per_poet.entry(r.poet.clone()).or_default() += 1;
        *form_distribution.entry(r.form.clone()).or_default() += 1;
        *meter_distribution.entry(r.meter.clone()).or_default() += 1;
        meter_sets.entry(r.poet.clone()).or_default().insert(&r.meter);
    }
    let lengths: Vec<f64> = c.records().iter().map(|r| r.verses.len() as f64).collect();
    StatsReport {
        poems: c.len(),
        verses: c.verse_count(),
        poets: c.poet_index().len(),
        poems_per_poet,
        verses_per_poet: c.verses_per_poet(),
        verses_per_poem: Summary::of(&lengths),
        form_distribution,
        meter_distribution,
        meters_per_poet: meter_sets.into_iter().map(|(k, v)| (k, v.len())).collect(),
    }
}

fn table(out: &mut String, title: &str, header: (&str, &str), rows: &BTreeMap<String, usize>) {
    let width = rows
        .keys()
        .map(|k| k.chars().count())
        .chain([header.0.len()])
        .max()
        .unwrap_or(0);
    let _ = writeln!(out, "\n{title}");
    let _ = writeln!(out, "{:<width$}  {:>8}", header.0, header.1);
    let mut sorted: Vec<_> = rows.iter().collect();
    sorted.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    for (k, v) in sorted {
        let pad = width - k.chars().count();
        let _ = writeln!(out, "{k}{}  {v:>8}", " ".repeat(pad));
    }
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    /// Aligned-column plain text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.verses_per_poem;
        let _ = writeln!(out, "poems   {:>10}", self.poems);
        let _ = writeln!(out, "verses  {:>10}", self.verses);
        let _ = writeln!(out, "poets   {:>10}", self.poets);
        let _ = writeln!(
            out,
            "verses per poem: mean {:.2}  median {:.1}  max {}  std {:.2}",
            s.mean, s.median, s.max, s.std
        );
        table(&mut out, "Poems per poet", ("Poet", "Poems"), &self.poems_per_poet);
        table(&mut out, "Verses per poet", ("Poet", "Verses"), &self.verses_per_poet);
        table(&mut out, "Forms", ("Form", "Poems"), &self.form_distribution);
        table(&mut out, "Meters", ("Meter", "Poems"), &self.meter_distribution);
        table(&mut out, "Meter diversity", ("Poet", "Meters"), &self.meters_per_poet);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, poet: &str, status: &str, verses: usize) -> String {
        let vs: Vec<Value> = (0..verses).map(|i| json!([format!("a{i} b"), "c d"])).collect();
        json!({"poem_id": id, "poet": poet, "title": null, "form": "ghazal",
               "meter": "m1", "status": status, "verses": vs})
        .to_string()
    }

    #[test]
    fn parses_three_records() {
        let text = [
            line("p1", "A", "confirmed", 2),
            line("p2", "B", "confirmed", 1),
            line("p3", "A", "contested", 3),
        ]
        .join("\n");
        let c = parse_corpus(&text).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.poet_index().len(), 2);
        assert_eq!(c.records()[2].poem_id, "p3");
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_corpus(""), Err(Error::EmptyCorpus)));
        assert!(matches!(parse_corpus("\n  \n"), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn missing_meter_names_line_and_field() {
        let bad = r#"{"poem_id":"x","poet":"A","form":"f","status":"confirmed","verses":[["a","b"]]}"#;
        let text = format!("{}\n{bad}", line("p1", "A", "confirmed", 1));
        match parse_corpus(&text) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "meter");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = [line("p1", "A", "confirmed", 1), line("p1", "B", "confirmed", 1)].join("\n");
        assert!(matches!(parse_corpus(&text), Err(Error::DuplicatePoem(id)) if id == "p1"));
    }

    #[test]
    fn single_hemistich_verse_keeps_empty_second_half() {
        let l = r#"{"poem_id":"x","poet":"A","form":"f","meter":"m","status":"confirmed","verses":[["only"]]}"#;
        let c = parse_corpus(l).unwrap();
        assert_eq!(c.records()[0].verses[0], Verse::new("only", ""));
    }

    #[test]
    fn filter_threshold_is_inclusive() {
        let text = [
            line("a1", "A", "confirmed", 60),
            line("b1", "B", "confirmed", 49),
            line("c1", "C", "confirmed", 50),
        ]
        .join("\n");
        let c = parse_corpus(&text).unwrap();
        let f = filter_corpus(&c, 50).unwrap();
        let poets: Vec<_> = f.poet_index().labels().to_vec();
        assert_eq!(poets, vec!["A".to_string(), "C".to_string()]);
        assert_eq!(f.poet_index().id_of("C"), Some(1));
    }

    #[test]
    fn contested_verses_do_not_count_toward_threshold() {
        let text = [line("a1", "A", "confirmed", 30), line("a2", "A", "ambiguous", 30)].join("\n");
        let c = parse_corpus(&text).unwrap();
        assert!(matches!(filter_corpus(&c, 50), Err(Error::NothingSurvives)));
    }

    #[test]
    fn all_contested_leaves_nothing() {
        let text = [line("a1", "A", "contested", 80), line("b1", "B", "anonymous", 80)].join("\n");
        let c = parse_corpus(&text).unwrap();
        assert!(matches!(filter_corpus(&c, 1), Err(Error::NothingSurvives)));
    }

    #[test]
    fn summary_of_single_poem() {
        let c = parse_corpus(&line("p", "A", "confirmed", 7)).unwrap();
        let s = corpus_stats(&c).verses_per_poem;
        assert_eq!((s.mean, s.median, s.std, s.max), (7.0, 7.0, 0.0, 7.0));
    }

    #[test]
    fn summary_of_two_poems() {
        let text = [line("p", "A", "confirmed", 1), line("q", "A", "confirmed", 3)].join("\n");
        let s = corpus_stats(&parse_corpus(&text).unwrap()).verses_per_poem;
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.median, 2.0);
        assert_eq!(s.std, 1.0);
    }

    #[test]
    fn text_report_lists_every_poet() {
        let text = [line("p", "A", "confirmed", 1), line("q", "Bee", "confirmed", 3)].join("\n");
        let report = corpus_stats(&parse_corpus(&text).unwrap()).to_text();
        assert!(report.contains("Bee"));
        assert!(report.contains("Poems per poet"));
    }
}
