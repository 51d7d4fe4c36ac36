//! Accuracy, per-class precision/recall/F1, macro averages, coverage and
//! confusion matrices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelIndex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Verse,
    PoemMajority,
    PoemWeighted,
    PoemThresholded,
}

impl Level {
    pub const ALL: [Level; 4] = [
        Level::Verse,
        Level::PoemMajority,
        Level::PoemWeighted,
        Level::PoemThresholded,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Verse => "verse",
            Level::PoemMajority => "poem_majority",
            Level::PoemWeighted => "poem_weighted",
            Level::PoemThresholded => "poem_thresholded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: Level,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub classes: Vec<ClassRow>,
    /// Fraction of instances that received a prediction (thresholded level only).
    pub coverage: Option<f64>,
    pub evaluated: usize,
    pub confusion: Vec<Vec<usize>>,
}

fn check(preds: &[usize], truth: &[usize], classes: usize) -> Result<()> {
    if preds.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if let Some(&l) = preds.iter().chain(truth).find(|&&l| l >= classes) {
        return Err(Error::Shape(format!("label {l} outside {classes} classes")));
    }
    Ok(())
}

/// Entry `(i, j)` counts instances of true class `i` predicted as `j`.
pub fn confusion_matrix(preds: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check(preds, truth, classes)?;
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &t) in preds.iter().zip(truth) {
        m[t][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Per-class and macro metrics. Every class enters the macro mean, including
/// classes with neither support nor predictions (they contribute zeros).
pub fn classification_report(preds: &[usize], truth: &[usize], classes: usize) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Invalid("classification report over no instances".into()));
    }
    let confusion = confusion_matrix(preds, truth, classes)?;
    Ok(from_confusion(confusion, Level::Verse))
}

fn from_confusion(confusion: Vec<Vec<usize>>, level: Level) -> EvalReport {
    let classes = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..classes).map(|i| confusion[i][i]).sum();
    let rows: Vec<ClassRow> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|r| r[c]).sum();
            let (precision, zp) = ratio(tp, predicted);
            let (recall, zr) = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassRow {
                label: c.to_string(),
                precision,
                recall,
                f1,
                support,
                predicted,
                zero_division: zp || zr,
            }
        })
        .collect();
    let mean = |f: fn(&ClassRow) -> f64| {
        if classes == 0 {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / classes as f64
        }
    };
    EvalReport {
        level,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        macro_precision: mean(|r| r.precision),
        macro_recall: mean(|r| r.recall),
        macro_f1: mean(|r| r.f1),
        classes: rows,
        coverage: None,
        evaluated: total,
        confusion,
    }
}

/// Report over the covered instances only; `None` predictions are abstentions.
pub fn abstention_report(preds: &[Option<usize>], truth: &[usize], classes: usize) -> Result<EvalReport> {
    if preds.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape("predictions and labels disagree".into()));
    }
    let (p, t): (Vec<usize>, Vec<usize>) = preds
        .iter()
        .zip(truth)
        .filter_map(|(p, &t)| p.map(|p| (p, t)))
        .unzip();
    check(&p, &t, classes)?;
    let confusion = confusion_matrix(&p, &t, classes)?;
    let mut r = from_confusion(confusion, Level::PoemThresholded);
    r.coverage = Some(p.len() as f64 / truth.len() as f64);
    Ok(r)
}

impl EvalReport {
    pub fn with_level(mut self, level: Level) -> Self {
        self.level = level;
        self
    }

    /// Replaces numeric class ids with names.
    pub fn with_names(mut self, names: &LabelIndex) -> Self {
        for (i, row) in self.classes.iter_mut().enumerate() {
            if let Some(n) = names.label(i) {
                row.label = n.to_owned();
            }
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }

    /// Aligned per-class table followed by the summary rows.
    pub fn to_text(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|r| r.label.chars().count())
            .chain(["Macro average".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "level: {}", self.level.as_str());
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "Poet", "Precision", "Recall", "F1-Score", "Support"
        );
        for r in &self.classes {
            let pad = width - r.label.chars().count();
            let _ = writeln!(
                out,
                "{}{}  {:>9.2}  {:>9.2}  {:>9.2}  {:>7}",
                r.label,
                " ".repeat(pad),
                r.precision,
                r.recall,
                r.f1,
                r.support
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>7}",
            "Macro average", self.macro_precision, self.macro_recall, self.macro_f1, self.evaluated
        );
        let _ = writeln!(out, "accuracy: {:.4}", self.accuracy);
        if let Some(c) = self.coverage {
            let _ = writeln!(out, "coverage: {c:.4}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let r = classification_report(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn all_class_zero_on_balanced_truth() {
        let r = classification_report(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.classes[0].precision, 0.5);
        assert_eq!(r.classes[0].recall, 1.0);
        assert!((r.classes[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((r.classes[1].precision, r.classes[1].recall, r.classes[1].f1), (0.0, 0.0, 0.0));
        assert!(r.classes[1].zero_division);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_class_counts_in_macro_mean() {
        let r = classification_report(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(r.classes[2].support, 0);
        assert_eq!(r.classes[2].f1, 0.0);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn anti_diagonal_confusion() {
        assert_eq!(
            confusion_matrix(&[1, 0, 1], &[0, 1, 0], 2).unwrap(),
            vec![vec![0, 2], vec![1, 0]]
        );
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(classification_report(&[0], &[0, 1], 2).is_err());
        assert!(classification_report(&[3], &[0], 2).is_err());
    }

    #[test]
    fn abstentions_reduce_coverage_only() {
        let r = abstention_report(&[Some(0), None, Some(1), None], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(r.coverage, Some(0.5));
        assert_eq!(r.evaluated, 2);
        assert_eq!(r.accuracy, 0.5);
        let none = abstention_report(&[None, None], &[0, 1], 2).unwrap();
        assert_eq!(none.coverage, Some(0.0));
        assert_eq!(none.evaluated, 0);
    }

    #[test]
    fn text_table_aligns_names() {
        let names = LabelIndex::from_labels(vec!["Hafez".into(), "Saadi Shirazi".into()]);
        let t = classification_report(&[0, 1], &[0, 1], 2).unwrap().with_names(&names).to_text();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[1].starts_with("Poet"));
        assert_eq!(lines[2].find("1.00"), lines[3].find("1.00"));
    }

    fn pairs() -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec((0usize..4, 0usize..4), 1..60)
    }

    proptest! {
        #[test]
        fn accuracy_is_trace_over_total(v in pairs()) {
            let (p, t): (Vec<_>, Vec<_>) = v.into_iter().unzip();
            let r = classification_report(&p, &t, 4).unwrap();
            let trace: usize = (0..4).map(|i| r.confusion[i][i]).sum();
            prop_assert_eq!(r.accuracy, trace as f64 / p.len() as f64);
            for c in 0..4 {
                let support = t.iter().filter(|&&x| x == c).count();
                prop_assert_eq!(r.confusion[c].iter().sum::<usize>(), support);
                prop_assert_eq!(r.classes[c].support, support);
            }
        }

        #[test]
        fn macro_f1_within_class_range(v in pairs()) {
            let (p, t): (Vec<_>, Vec<_>) = v.into_iter().unzip();
            let r = classification_report(&p, &t, 4).unwrap();
            let lo = r.classes.iter().map(|c| c.f1).fold(f64::INFINITY, f64::min);
            let hi = r.classes.iter().map(|c| c.f1).fold(0.0, f64::max);
            prop_assert!(r.macro_f1 >= lo - 1e-12 && r.macro_f1 <= hi + 1e-12);
            for c in &r.classes {
                prop_assert!((0.0..=1.0).contains(&c.precision));
                prop_assert!((0.0..=1.0).contains(&c.recall));
            }
        }

        #[test]
        fn permutation_invariant(v in pairs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut w = v.clone();
            w.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p, t): (Vec<_>, Vec<_>) = v.into_iter().unzip();
            let (q, u): (Vec<_>, Vec<_>) = w.into_iter().unzip();
            prop_assert_eq!(classification_report(&p, &t, 4).unwrap(), classification_report(&q, &u, 4).unwrap());
        }
    }
}
