use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Binary metrics with malignant as the positive class. When a denominator is
/// zero the metric is reported as 0 and its `*_undefined` flag is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    /// Support-weighted average of the per-class scores.
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_labels(n: usize, labels: &[u8]) -> Result<()> {
    if n != labels.len() {
        return Err(Error::contract(format!("{n} scores but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::contract("metrics need at least one example"));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("labels must be 0 or 1, found {l}")));
    }
    Ok(())
}

/// Thresholds `probs` (positive iff `p ≥ threshold`) and scores the result.
pub fn confusion_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMetrics> {
    check_labels(probs.len(), labels)?;
    let mut c = Confusion::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let n = probs.len();
    let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
    let (neg_precision, _) = ratio(c.tn, c.tn + c.fn_);
    let (neg_recall, _) = ratio(c.tn, c.tn + c.fp);
    let (w_pos, w_neg) = ((c.tp + c.fn_) as f64 / n as f64, (c.tn + c.fp) as f64 / n as f64);
    Ok(ConfusionMetrics {
        confusion: c,
        accuracy: (c.tp + c.tn) as f64 / n as f64,
        precision,
        recall,
        f1: f1(precision, recall),
        precision_undefined,
        recall_undefined,
        weighted_precision: w_pos * precision + w_neg * neg_precision,
        weighted_recall: w_pos * recall + w_neg * neg_recall,
        weighted_f1: w_pos * f1(precision, recall) + w_neg * f1(neg_precision, neg_recall),
    })
}

/// Mann–Whitney estimate of the area under the ROC curve; ties count half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(scores.len(), labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric {
            op: "auroc",
            detail: "NaN score".into(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auroc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the pair count, kept integral: 2 per ordered pair, 1 per tie.
    let mut twice = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice as f64 / 2.0 / (n_pos * n_neg) as f64)
}

/// Nodule probability from stack probabilities: their arithmetic mean.
pub fn aggregate_nodule(stack_probs: &[f64]) -> Result<f64> {
    if stack_probs.is_empty() {
        return Err(Error::contract("cannot aggregate an empty list of stack probabilities"));
    }
    Ok(stack_probs.iter().sum::<f64>() / stack_probs.len() as f64)
}

/// The metrics reported for one prediction level of one fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the evaluated set holds a single class.
    pub auroc: Option<f64>,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

impl MetricSet {
    pub fn compute(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let c = confusion_metrics(probs, labels, threshold)?;
        let auroc = match auroc(probs, labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            n: probs.len(),
            accuracy: c.accuracy,
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            auroc,
            precision_undefined: c.precision_undefined,
            recall_undefined: c.recall_undefined,
            weighted_precision: c.weighted_precision,
            weighted_recall: c.weighted_recall,
            weighted_f1: c.weighted_f1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let m = confusion_metrics(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));

        let m = confusion_metrics(&[0.1, 0.2, 0.3], &[1, 0, 0], 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.precision_undefined && !m.recall_undefined);

        let m = confusion_metrics(&[0.6, 0.6, 0.4], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 1, fp: 1, tn: 0, fn_: 1 });
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));

        assert!(confusion_metrics(&[0.5], &[1, 0], 0.5).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn aggregation() {
        assert!((aggregate_nodule(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(aggregate_nodule(&[0.37]).unwrap(), 0.37);
        assert!(aggregate_nodule(&[]).is_err());
    }

    #[test]
    fn metric_set_without_auroc() {
        let m = MetricSet::compute(&[0.2, 0.7], &[0, 0], 0.5).unwrap();
        assert_eq!(m.auroc, None);
        assert_eq!(m.accuracy, 0.5);
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(0u8..2, n).prop_filter("both classes", |l| l.contains(&0) && l.contains(&1)),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_maps((s, l) in scored()) {
            let a = auroc(&s, &l).unwrap();
            let affine: Vec<f64> = s.iter().map(|x| 2.0 * x + 1.0).collect();
            let squashed: Vec<f64> = s.iter().map(|&x| crate::autodiff::sigmoid(x)).collect();
            prop_assert_eq!(a, auroc(&affine, &l).unwrap());
            prop_assert_eq!(a, auroc(&squashed, &l).unwrap());
        }

        #[test]
        fn zero_threshold_recalls_everything((s, l) in scored()) {
            let probs: Vec<f64> = s.iter().map(|&x| crate::autodiff::sigmoid(x)).collect();
            prop_assert_eq!(confusion_metrics(&probs, &l, 0.0).unwrap().recall, 1.0);
        }

        #[test]
        fn constant_predictor_is_chance(l in prop::collection::vec(0u8..2, 2..30), p in 0.0f64..1.0) {
            prop_assume!(l.contains(&0) && l.contains(&1));
            let probs: Vec<f64> = l.iter().map(|_| aggregate_nodule(&[p, p, p]).unwrap()).collect();
            prop_assert_eq!(auroc(&probs, &l).unwrap(), 0.5);
        }
    }
}
