//! Confusion-matrix accumulation and the three evaluation measures:
//! macro-averaged F1, weighted accuracy (WA), and unweighted accuracy (UWA).
//!
//! Conventions: rows are gold classes, columns are predictions; masked
//! utterances never enter the matrix; any 0/0 in precision/recall/F1 is
//! defined as 0. WA weights per-class recall by the gold share of the
//! evaluated utterances, which collapses algebraically to `trace/total` —
//! it is computed that way so the identity holds exactly.

use crate::error::{Error, Result};
use crate::tensor::exact_sum;

/// Square count matrix; `counts[gold * n + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { n: n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.n + pred]
    }

    pub fn record(&mut self, gold: usize, pred: usize) -> Result<()> {
        if gold >= self.n || pred >= self.n {
            return Err(Error::Index(format!(
                "class pair ({}, {}) out of range for {} classes",
                gold, pred, self.n
            )));
        }
        self.counts[gold * self.n + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }

    /// Gold count of class `c` (row sum).
    pub fn gold_count(&self, c: usize) -> u64 {
        (0..self.n).map(|p| self.get(c, p)).sum()
    }

    /// Prediction count of class `c` (column sum).
    pub fn pred_count(&self, c: usize) -> u64 {
        (0..self.n).map(|g| self.get(g, c)).sum()
    }

    /// Entrywise addition; addition is associative and commutative, so
    /// partial matrices from parallel shards merge deterministically.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n != other.n {
            return Err(Error::Contract(format!(
                "cannot merge confusion matrices over {} and {} classes",
                self.n, other.n
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        (0..self.n).map(|g| (0..self.n).map(|p| self.get(g, p)).collect()).collect()
    }
}

/// Accumulates a matrix from aligned prediction/gold streams; positions with
/// `None` gold (masked utterances) are skipped.
pub fn confusion(
    preds: &[usize],
    golds: &[Option<usize>],
    n_classes: usize,
) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "prediction/gold length mismatch: {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, g) in preds.iter().zip(golds) {
        if let Some(g) = *g {
            cm.record(g, p)?;
        }
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 with the 0/0 → 0 convention.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn class_scores(cm: &ConfusionMatrix, c: usize) -> ClassScores {
    let tp = cm.get(c, c);
    let precision = ratio(tp, cm.pred_count(c));
    let recall = ratio(tp, cm.gold_count(c));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassScores { precision, recall, f1 }
}

/// Mean F1 over all classes, including classes absent from the gold.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    if cm.n_classes() == 0 {
        return 0.0;
    }
    let sum = exact_sum((0..cm.n_classes()).map(|c| class_scores(cm, c).f1));
    sum / cm.n_classes() as f64
}

fn require_nonempty(cm: &ConfusionMatrix) -> Result<u64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metric(
            "accuracy is undefined on an empty confusion matrix (no unmasked utterances)".into(),
        ));
    }
    Ok(total)
}

/// Weighted accuracy: per-class recall weighted by the class's share of the
/// evaluated gold. Equal to `trace/total` and computed as such, so the
/// identity is exact.
pub fn wa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = require_nonempty(cm)?;
    Ok(cm.trace() as f64 / total as f64)
}

/// Unweighted accuracy: plain mean of per-class recall. With `present_only`,
/// the mean runs over classes that appear in the gold; otherwise over all
/// classes, counting zero-gold classes as recall 0.
pub fn uwa_with(cm: &ConfusionMatrix, present_only: bool) -> Result<f64> {
    require_nonempty(cm)?;
    let classes: Vec<usize> = (0..cm.n_classes())
        .filter(|&c| !present_only || cm.gold_count(c) > 0)
        .collect();
    let sum = exact_sum(classes.iter().map(|&c| class_scores(cm, c).recall));
    Ok(sum / classes.len() as f64)
}

pub fn uwa(cm: &ConfusionMatrix) -> Result<f64> {
    uwa_with(cm, false)
}

/// One evaluation's full scorecard, shaped for JSON output.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub per_class: Vec<ClassScores>,
    pub confusion: Vec<Vec<u64>>,
    pub macro_f1: f64,
    pub wa: f64,
    pub uwa: f64,
    pub evaluated: u64,
    pub masked: u64,
}

pub fn report(cm: &ConfusionMatrix, labels: &[String], masked: u64) -> Result<EvalReport> {
    if labels.len() != cm.n_classes() {
        return Err(Error::Contract(format!(
            "{} labels for a {}-class confusion matrix",
            labels.len(),
            cm.n_classes()
        )));
    }
    Ok(EvalReport {
        labels: labels.to_vec(),
        per_class: (0..cm.n_classes()).map(|c| class_scores(cm, c)).collect(),
        confusion: cm.rows(),
        macro_f1: macro_f1(cm),
        wa: wa(cm)?,
        uwa: uwa(cm)?,
        evaluated: cm.total(),
        masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm_from(rows: &[&[u64]]) -> ConfusionMatrix {
        let n = rows.len();
        let mut cm = ConfusionMatrix::new(n);
        for (g, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n);
            for (p, &k) in row.iter().enumerate() {
                for _ in 0..k {
                    cm.record(g, p).unwrap();
                }
            }
        }
        cm
    }

    #[test]
    fn confusion_hand_count() {
        let golds: Vec<Option<usize>> =
            [0, 0, 0, 1, 1, 1, 1].iter().map(|&g| Some(g)).collect();
        let preds = vec![0, 0, 1, 1, 1, 1, 0];
        let cm = confusion(&preds, &golds, 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![2, 1], vec![1, 3]]);
    }

    #[test]
    fn confusion_perfect_is_diagonal() {
        let golds: Vec<Option<usize>> = (0..3).chain(0..3).map(Some).collect();
        let preds: Vec<usize> = (0..3).chain(0..3).collect();
        let cm = confusion(&preds, &golds, 3).unwrap();
        assert_eq!(cm.trace(), 6);
        assert_eq!(cm.total(), 6);
        assert_eq!(macro_f1(&cm), 1.0);
        assert_eq!(wa(&cm).unwrap(), 1.0);
        assert_eq!(uwa(&cm).unwrap(), 1.0);
    }

    #[test]
    fn confusion_all_masked_is_zero() {
        let cm = confusion(&[0, 1, 0], &[None, None, None], 2).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn confusion_length_mismatch() {
        let err = confusion(&[0], &[Some(0), Some(1)], 2).unwrap_err();
        assert_eq!(err.kind(), "contract");
    }

    #[test]
    fn macro_f1_hand_values() {
        let cm = cm_from(&[&[2, 1], &[1, 3]]);
        let s0 = class_scores(&cm, 0);
        let s1 = class_scores(&cm, 1);
        assert!((s0.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s1.f1 - 3.0 / 4.0).abs() < 1e-15);
        assert!((macro_f1(&cm) - 17.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_counts_silent_classes_as_zero() {
        // Class 2 never appears in gold or predictions: F1 = 0 still divides
        // the mean by 3.
        let cm = cm_from(&[&[2, 0, 0], &[0, 3, 0], &[0, 0, 0]]);
        assert!((macro_f1(&cm) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wa_hand_value_and_exact_identity() {
        let cm = cm_from(&[&[2, 1], &[1, 3]]);
        let got = wa(&cm).unwrap();
        assert_eq!(got, 5.0 / 7.0);
        assert!((got - (3.0 / 7.0) * (2.0 / 3.0) - (4.0 / 7.0) * (3.0 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn wa_uwa_reject_empty() {
        let cm = ConfusionMatrix::new(2);
        assert_eq!(wa(&cm).unwrap_err().kind(), "metric");
        assert_eq!(uwa(&cm).unwrap_err().kind(), "metric");
    }

    #[test]
    fn uwa_hand_value() {
        let cm = cm_from(&[&[2, 1], &[1, 3]]);
        assert!((uwa(&cm).unwrap() - 17.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn uwa_present_only_flag() {
        // Class 2 has zero gold: all-classes averages its recall 0 in,
        // present-only leaves it out.
        let cm = cm_from(&[&[2, 0, 0], &[1, 3, 0], &[0, 0, 0]]);
        let all = uwa_with(&cm, false).unwrap();
        let present = uwa_with(&cm, true).unwrap();
        assert!((all - (1.0 + 3.0 / 4.0) / 3.0).abs() < 1e-15);
        assert!((present - (1.0 + 3.0 / 4.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn wa_equals_trace_over_total_exhaustively() {
        // Every 2×2 and 3×3 matrix with entries up to 3.
        fn check(n: usize, entries: &[u64]) {
            let mut cm = ConfusionMatrix::new(n);
            for (i, &k) in entries.iter().enumerate() {
                cm.counts[i] = k;
            }
            let total = cm.total();
            if total == 0 {
                assert!(wa(&cm).is_err());
                return;
            }
            let got = wa(&cm).unwrap();
            assert_eq!(got, cm.trace() as f64 / total as f64);
            // The weighted-sum form agrees up to rounding.
            let weighted: f64 = (0..n)
                .map(|c| {
                    let share = cm.gold_count(c) as f64 / total as f64;
                    share * class_scores(&cm, c).recall
                })
                .sum();
            assert!((got - weighted).abs() < 1e-12, "{got} vs {weighted}");
        }
        for bits in 0..4u64.pow(4) {
            let e: Vec<u64> = (0..4).map(|i| (bits >> (2 * i)) & 3).collect();
            check(2, &e);
        }
        for bits in 0..4u64.pow(9) {
            let e: Vec<u64> = (0..9).map(|i| (bits >> (2 * i)) & 3).collect();
            check(3, &e);
        }
    }

    #[test]
    fn class_permutation_leaves_metrics_unchanged() {
        let cm = cm_from(&[&[5, 2, 0], &[1, 7, 3], &[0, 2, 4]]);
        let perm = [2usize, 0, 1];
        let mut permuted = ConfusionMatrix::new(3);
        for g in 0..3 {
            for p in 0..3 {
                permuted.counts[perm[g] * 3 + perm[p]] = cm.get(g, p);
            }
        }
        assert_eq!(macro_f1(&cm), macro_f1(&permuted));
        assert_eq!(wa(&cm).unwrap(), wa(&permuted).unwrap());
        assert_eq!(uwa(&cm).unwrap(), uwa(&permuted).unwrap());
    }

    #[test]
    fn merge_matches_single_pass() {
        let golds_a: Vec<Option<usize>> = vec![Some(0), Some(1), None, Some(1)];
        let preds_a = vec![0, 0, 1, 1];
        let golds_b: Vec<Option<usize>> = vec![Some(1), Some(0)];
        let preds_b = vec![1, 1];
        let mut merged = confusion(&preds_a, &golds_a, 2).unwrap();
        merged.merge(&confusion(&preds_b, &golds_b, 2).unwrap()).unwrap();
        let golds_all: Vec<Option<usize>> =
            golds_a.iter().chain(&golds_b).copied().collect();
        let preds_all: Vec<usize> = preds_a.iter().chain(&preds_b).copied().collect();
        assert_eq!(merged, confusion(&preds_all, &golds_all, 2).unwrap());
        let err = merged.merge(&ConfusionMatrix::new(3)).unwrap_err();
        assert_eq!(err.kind(), "contract");
    }

    #[test]
    fn report_shape_and_counts() {
        let cm = cm_from(&[&[2, 1], &[1, 3]]);
        let labels = vec!["a".to_string(), "b".to_string()];
        let r = report(&cm, &labels, 4).unwrap();
        assert_eq!(r.evaluated, 7);
        assert_eq!(r.masked, 4);
        assert_eq!(r.confusion, vec![vec![2, 1], vec![1, 3]]);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["per_class"][1]["recall"].as_f64().unwrap() > 0.74);
        assert!((json["macro_f1"].as_f64().unwrap() - 17.0 / 24.0).abs() < 1e-12);
        assert_eq!(report(&cm, &labels[..1], 0).unwrap_err().kind(), "contract");
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(
            n in 1usize..5,
            entries in proptest::collection::vec(0u64..50, 25),
        ) {
            let mut cm = ConfusionMatrix::new(n);
            for i in 0..n * n {
                cm.counts[i] = entries[i];
            }
            let m = macro_f1(&cm);
            prop_assert!((0.0..=1.0).contains(&m));
            if cm.total() > 0 {
                let w = wa(&cm).unwrap();
                let u = uwa(&cm).unwrap();
                prop_assert!((0.0..=1.0).contains(&w));
                prop_assert!((0.0..=1.0).contains(&u));
            }
        }

        #[test]
        fn macro_f1_matches_brute_force_from_pairs(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
        ) {
            let preds: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
            let golds: Vec<Option<usize>> = pairs.iter().map(|&(_, g)| Some(g)).collect();
            let cm = confusion(&preds, &golds, 4).unwrap();
            let mut brute = 0.0;
            for c in 0..4 {
                let tp = pairs.iter().filter(|&&(p, g)| p == c && g == c).count() as f64;
                let pred_c = pairs.iter().filter(|&&(p, _)| p == c).count() as f64;
                let gold_c = pairs.iter().filter(|&&(_, g)| g == c).count() as f64;
                let prec = if pred_c == 0.0 { 0.0 } else { tp / pred_c };
                let rec = if gold_c == 0.0 { 0.0 } else { tp / gold_c };
                let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
                brute += f1;
            }
            brute /= 4.0;
            prop_assert!((macro_f1(&cm) - brute).abs() < 1e-12);
        }
    }
}
