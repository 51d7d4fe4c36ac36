//! Poem-level aggregation of verse distributions: majority vote, probability
//! weighted vote, thresholded vote with abstention, and threshold sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelIndex;
use crate::error::{Error, Result};
use crate::tensor::argmax;

/// Sweep thresholds used when none are given.
pub const DEFAULT_TAUS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Majority,
    Weighted,
    Thresholded,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Majority => "majority",
            Strategy::Weighted => "weighted",
            Strategy::Thresholded => "thresholded",
        }
    }
}

/// How summed verse probabilities become a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    /// `max(s) / n`, always in `[0, 1]`.
    #[default]
    Mean,
    /// `max(s)`, grows with poem length.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoemPrediction {
    pub poem_id: String,
    pub strategy: Strategy,
    /// `None` means the poem was abstained on.
    pub label: Option<usize>,
    pub confidence: f64,
    pub verse_labels: Vec<usize>,
    pub verse_max_probs: Vec<f64>,
}

impl PoemPrediction {
    pub fn abstained(&self) -> bool {
        self.label.is_none()
    }
}

fn check_distributions(probs: &[Vec<f64>]) -> Result<usize> {
    let first = probs
        .first()
        .ok_or_else(|| Error::Invalid("no verse predictions to aggregate".into()))?;
    let c = first.len();
    for p in probs {
        if p.len() != c || c == 0 {
            return Err(Error::Shape("verse distributions differ in length".into()));
        }
        let sum: f64 = p.iter().sum();
        if p.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("not a probability distribution (sum {sum})")));
        }
    }
    Ok(c)
}

/// Most frequent label. Ties go to the larger summed max-probability, then to
/// the smaller label.
pub fn majority_vote(labels: &[usize], max_probs: &[f64]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::Invalid("majority vote over no verses".into()));
    }
    if labels.len() != max_probs.len() {
        return Err(Error::Shape("labels and probabilities disagree".into()));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; classes];
    let mut mass = vec![0.0f64; classes];
    for (&l, &p) in labels.iter().zip(max_probs) {
        counts[l] += 1;
        mass[l] += p;
    }
    let mut best = 0;
    for l in 1..classes {
        let better = counts[l] > counts[best] || (counts[l] == counts[best] && mass[l] > mass[best]);
        if better {
            best = l;
        }
    }
    Ok(best)
}

/// Sums the distributions; the label is the argmax (smallest id on ties).
pub fn weighted_vote(probs: &[Vec<f64>], mode: ConfidenceMode) -> Result<(usize, f64)> {
    let c = check_distributions(probs)?;
    let mut s = vec![0.0; c];
    for p in probs {
        for (a, b) in s.iter_mut().zip(p) {
            *a += b;
        }
    }
    let label = argmax(&s);
    let confidence = match mode {
        ConfidenceMode::Mean => s[label] / probs.len() as f64,
        ConfidenceMode::Sum => s[label],
    };
    Ok((label, confidence))
}

/// Thresholds lie in `(0, 1)`; summed confidences only need a positive one.
fn check_tau(tau: f64, mode: ConfidenceMode) -> Result<()> {
    let upper = match mode {
        ConfidenceMode::Mean => 1.0,
        ConfidenceMode::Sum => f64::INFINITY,
    };
    if !(tau > 0.0 && tau < upper) {
        return Err(Error::Config(format!("threshold {tau} must lie in (0, {upper})")));
    }
    Ok(())
}

/// Weighted vote that abstains when the confidence falls below `tau`.
pub fn thresholded_vote(probs: &[Vec<f64>], tau: f64, mode: ConfidenceMode) -> Result<(Option<usize>, f64)> {
    check_tau(tau, mode)?;
    let (label, confidence) = weighted_vote(probs, mode)?;
    Ok(((confidence >= tau).then_some(label), confidence))
}

/// One poem under one strategy. `tau` is only read by the thresholded strategy.
pub fn aggregate_poem(
    poem_id: &str,
    probs: &[Vec<f64>],
    strategy: Strategy,
    tau: f64,
    mode: ConfidenceMode,
) -> Result<PoemPrediction> {
    check_distributions(probs)?;
    let verse_labels: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let verse_max_probs: Vec<f64> = probs.iter().zip(&verse_labels).map(|(p, &l)| p[l]).collect();
    let (label, confidence) = match strategy {
        Strategy::Majority => {
            let l = majority_vote(&verse_labels, &verse_max_probs)?;
            let votes = verse_labels.iter().filter(|&&v| v == l).count();
            (Some(l), votes as f64 / verse_labels.len() as f64)
        }
        Strategy::Weighted => {
            let (l, c) = weighted_vote(probs, mode)?;
            (Some(l), c)
        }
        Strategy::Thresholded => thresholded_vote(probs, tau, mode)?,
    };
    Ok(PoemPrediction {
        poem_id: poem_id.to_owned(),
        strategy,
        label,
        confidence,
        verse_labels,
        verse_max_probs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    /// Accuracy over covered poems; `None` when nothing is covered.
    pub accuracy: Option<f64>,
    pub coverage: f64,
    pub covered: usize,
    pub total: usize,
}

/// Accuracy on covered poems and coverage for each threshold in `taus`
/// (ascending).
pub fn sweep_thresholds(
    poem_probs: &[Vec<Vec<f64>>],
    labels: &[usize],
    taus: &[f64],
    mode: ConfidenceMode,
) -> Result<Vec<SweepRow>> {
    if poem_probs.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape("poem predictions and labels disagree".into()));
    }
    if taus.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("thresholds must be strictly ascending".into()));
    }
    taus.iter().try_for_each(|&t| check_tau(t, mode))?;
    let votes: Vec<(usize, f64)> = poem_probs
        .iter()
        .map(|p| weighted_vote(p, mode))
        .collect::<Result<_>>()?;
    let total = labels.len();
    Ok(taus
        .iter()
        .map(|&tau| {
            let (mut covered, mut correct) = (0usize, 0usize);
            for (&(l, conf), &y) in votes.iter().zip(labels) {
                if conf >= tau {
                    covered += 1;
                    correct += usize::from(l == y);
                }
            }
            SweepRow {
                threshold: tau,
                accuracy: (covered > 0).then(|| correct as f64 / covered as f64),
                coverage: covered as f64 / total as f64,
                covered,
                total,
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("threshold,accuracy,coverage,covered,total\n");
    for r in rows {
        let acc = r.accuracy.map_or_else(|| "undefined".to_owned(), |a| format!("{a:.6}"));
        let _ = writeln!(out, "{},{acc},{:.6},{},{}", r.threshold, r.coverage, r.covered, r.total);
    }
    out
}

pub fn predictions_csv(preds: &[PoemPrediction], poets: &LabelIndex) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["poem_id", "strategy", "label", "confidence", "abstained"])
        .expect("in-memory csv write");
    for p in preds {
        let label = p.label.map_or("ABSTAIN", |l| poets.label(l).unwrap_or("?"));
        w.write_record([
            p.poem_id.as_str(),
            p.strategy.as_str(),
            label,
            &format!("{:.6}", p.confidence),
            if p.abstained() { "true" } else { "false" },
        ])
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as Gen;

    #[test]
    fn majority_cases() {
        assert_eq!(majority_vote(&[0, 0, 1], &[0.5, 0.5, 0.9]).unwrap(), 0);
        assert_eq!(majority_vote(&[3], &[0.4]).unwrap(), 3);
        assert_eq!(majority_vote(&[0, 1], &[0.9, 0.6]).unwrap(), 0);
        assert_eq!(majority_vote(&[0, 1], &[0.6, 0.9]).unwrap(), 1);
        assert_eq!(majority_vote(&[1, 0], &[0.7, 0.7]).unwrap(), 0);
        assert!(majority_vote(&[], &[]).is_err());
    }

    #[test]
    fn weighted_cases() {
        let (l, c) = weighted_vote(&[vec![0.2, 0.7, 0.1]], ConfidenceMode::Mean).unwrap();
        assert_eq!((l, c), (1, 0.7));
        let (l, c) = weighted_vote(&[vec![0.6, 0.4], vec![0.4, 0.6]], ConfidenceMode::Mean).unwrap();
        assert_eq!(l, 0);
        assert!((c - 0.5).abs() < 1e-15);
        let (l, c) = weighted_vote(&[vec![0.9, 0.1], vec![0.4, 0.6]], ConfidenceMode::Mean).unwrap();
        assert_eq!(l, 0);
        assert!((c - 0.65).abs() < 1e-12);
        let (_, s) = weighted_vote(&[vec![0.9, 0.1], vec![0.4, 0.6]], ConfidenceMode::Sum).unwrap();
        assert!((s - 1.3).abs() < 1e-12);
        assert!(weighted_vote(&[], ConfidenceMode::Mean).is_err());
        assert!(weighted_vote(&[vec![0.5, 0.6]], ConfidenceMode::Mean).is_err());
    }

    #[test]
    fn threshold_cases() {
        let p = [vec![0.8, 0.2]];
        assert_eq!(thresholded_vote(&p, 0.7, ConfidenceMode::Mean).unwrap().0, Some(0));
        let q = [vec![0.69, 0.31]];
        assert_eq!(thresholded_vote(&q, 0.7, ConfidenceMode::Mean).unwrap().0, None);
        assert!(thresholded_vote(&q, 0.0, ConfidenceMode::Mean).is_err());
        assert!(thresholded_vote(&q, 1.0, ConfidenceMode::Mean).is_err());
    }

    #[test]
    fn sweep_edges() {
        let probs = vec![vec![vec![0.8, 0.2]], vec![vec![0.3, 0.7]], vec![vec![0.55, 0.45]]];
        let rows = sweep_thresholds(&probs, &[0, 0, 0], &[0.01, 0.6, 0.99], ConfidenceMode::Mean).unwrap();
        assert_eq!(rows[0].coverage, 1.0);
        assert_eq!(rows[0].accuracy, Some(2.0 / 3.0));
        assert_eq!(rows[1].covered, 2);
        assert_eq!(rows[1].accuracy, Some(0.5));
        assert_eq!(rows[2].coverage, 0.0);
        assert_eq!(rows[2].accuracy, None);
        assert!(sweep_csv(&rows).lines().nth(3).unwrap().contains("undefined"));
        assert!(sweep_thresholds(&probs, &[0, 0, 0], &[0.7, 0.5], ConfidenceMode::Mean).is_err());
    }

    #[test]
    fn predictions_csv_marks_abstention() {
        let poets = LabelIndex::from_labels(vec!["A".into(), "B".into()]);
        let p = aggregate_poem("p1", &[vec![0.6, 0.4]], Strategy::Thresholded, 0.9, ConfidenceMode::Mean).unwrap();
        let csv = predictions_csv(&[p], &poets);
        assert_eq!(csv.lines().nth(1).unwrap(), "p1,thresholded,ABSTAIN,0.600000,true");
    }

    fn distribution(c: usize) -> impl Gen<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    fn poem(c: usize) -> impl Gen<Value = Vec<Vec<f64>>> {
        prop::collection::vec(distribution(c), 1..10)
    }

    proptest! {
        #[test]
        fn coverage_non_increasing(poems in prop::collection::vec(poem(4), 1..30), labels in prop::collection::vec(0usize..4, 30)) {
            let labels = &labels[..poems.len()];
            let rows = sweep_thresholds(&poems, labels, &DEFAULT_TAUS, ConfidenceMode::Mean).unwrap();
            for w in rows.windows(2) {
                prop_assert!(w[1].coverage <= w[0].coverage);
            }
        }

        #[test]
        fn near_zero_threshold_equals_weighted(p in poem(5)) {
            let (l, c) = weighted_vote(&p, ConfidenceMode::Mean).unwrap();
            let (t, tc) = thresholded_vote(&p, f64::MIN_POSITIVE, ConfidenceMode::Mean).unwrap();
            prop_assert_eq!(t, Some(l));
            prop_assert_eq!(tc, c);
        }

        #[test]
        fn single_verse_strategies_agree(d in distribution(6)) {
            let p = vec![d.clone()];
            let m = aggregate_poem("x", &p, Strategy::Majority, 0.5, ConfidenceMode::Mean).unwrap();
            let w = aggregate_poem("x", &p, Strategy::Weighted, 0.5, ConfidenceMode::Mean).unwrap();
            prop_assert_eq!(m.label, Some(argmax(&d)));
            prop_assert_eq!(w.label, Some(argmax(&d)));
            prop_assert_eq!(w.confidence, d[argmax(&d)]);
        }

        #[test]
        fn weighted_label_ignores_positive_scaling(p in poem(4)) {
            let (l, _) = weighted_vote(&p, ConfidenceMode::Mean).unwrap();
            let (ls, _) = weighted_vote(&p, ConfidenceMode::Sum).unwrap();
            prop_assert_eq!(l, ls);
        }

        #[test]
        fn mean_confidence_in_unit_interval(p in poem(3)) {
            let (_, c) = weighted_vote(&p, ConfidenceMode::Mean).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        }
    }
}
