//! Classification metrics, seed aggregation and divergence detection.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub diverged: bool,
}

impl RunMetrics {
    /// Model-selection score: mean of accuracy and macro-F1.
    pub fn selection_score(&self) -> f64 {
        (self.accuracy + self.macro_f1) / 2.0
    }
}

/// Accuracy and F1 scores over `NUM_CLASSES` classes. A class with no
/// predictions and no support has F1 0.
pub fn compute_metrics(preds: &[usize], labels: &[usize]) -> Result<RunMetrics> {
    compute_metrics_with(preds, labels, NUM_CLASSES)
}

pub fn compute_metrics_with(preds: &[usize], labels: &[usize], classes: usize) -> Result<RunMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if let Some(&value) = preds.iter().chain(labels).find(|&&v| v >= classes) {
        return Err(Error::ClassOutOfRange { value, classes });
    }
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        predicted[p] += 1;
        support[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let n = labels.len() as f64;
    // F1 = 2 tp / (predicted + support), which avoids precision/recall 0/0 cases.
    let per_class_f1: Vec<f64> = (0..classes)
        .map(|c| {
            let denom = predicted[c] + support[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let correct: usize = tp.iter().sum();
    Ok(RunMetrics {
        accuracy: correct as f64 / n,
        macro_f1: per_class_f1.iter().sum::<f64>() / classes as f64,
        weighted_f1: per_class_f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / n,
        per_class_f1,
        diverged: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(MeanStd { mean, std: Float::sqrt(var) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub weighted_f1: MeanStd,
    pub per_class_f1: Vec<MeanStd>,
    pub runs: usize,
    pub diverged: usize,
}

/// Aggregates over the runs not flagged as diverged.
pub fn aggregate(runs: &[RunMetrics]) -> Result<AggregateMetrics> {
    if runs.is_empty() {
        return Err(Error::Empty("runs"));
    }
    let kept: Vec<&RunMetrics> = runs.iter().filter(|r| !r.diverged).collect();
    if kept.is_empty() {
        return Err(Error::AllDiverged(runs.len()));
    }
    let stat = |f: &dyn Fn(&RunMetrics) -> f64| {
        let xs: Vec<f64> = kept.iter().map(|r| f(r)).collect();
        mean_std(&xs).expect("non-empty")
    };
    let classes = kept[0].per_class_f1.len();
    Ok(AggregateMetrics {
        accuracy: stat(&|r| r.accuracy),
        macro_f1: stat(&|r| r.macro_f1),
        weighted_f1: stat(&|r| r.weighted_f1),
        per_class_f1: (0..classes).map(|c| stat(&|r| r.per_class_f1[c])).collect(),
        runs: kept.len(),
        diverged: runs.len() - kept.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRule {
    pub factor: f64,
    pub window: usize,
}

impl Default for DivergenceRule {
    fn default() -> Self {
        DivergenceRule { factor: 2.0, window: 2 }
    }
}

/// Index of the epoch at which the loss history is first judged diverged:
/// a non-finite loss, or `window` consecutive losses above `factor` times
/// the best loss seen before them.
pub fn divergence_epoch(losses: &[f64], rule: DivergenceRule) -> Option<usize> {
    let mut best = f64::INFINITY;
    let mut run = 0;
    for (i, &loss) in losses.iter().enumerate() {
        if !loss.is_finite() {
            return Some(i);
        }
        if best.is_finite() && loss > rule.factor * best {
            run += 1;
            if run >= rule.window.max(1) {
                return Some(i);
            }
        } else {
            run = 0;
        }
        best = best.min(loss);
    }
    None
}

pub fn detect_divergence(losses: &[f64], rule: DivergenceRule) -> bool {
    divergence_epoch(losses, rule).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let m = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-15);
        // Class 1: precision 1/3, recall 1.
        assert!((m.per_class_f1[1] - 0.5).abs() < 1e-15);
        assert_eq!(m.per_class_f1[2], 0.0);
        assert!((m.macro_f1 - 7.0 / 18.0).abs() < 1e-15);
        assert!((m.weighted_f1 - 11.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_absent_class() {
        let m = compute_metrics(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.weighted_f1), (1.0, 1.0, 1.0));
        let m = compute_metrics(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(m.per_class_f1[2], 0.0);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(compute_metrics(&[0], &[0, 1]).is_err());
        assert!(compute_metrics(&[3], &[0]).is_err());
    }

    proptest! {
        #[test]
        fn macro_between_extremes(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = compute_metrics(&p, &l).unwrap();
            let lo = m.per_class_f1.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = m.per_class_f1.iter().cloned().fold(0.0, f64::max);
            prop_assert!(m.macro_f1 <= hi + 1e-12 && m.macro_f1 >= lo - 1e-12);
            for s in [m.accuracy, m.macro_f1, m.weighted_f1] {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn weighted_equals_macro_with_equal_support(preds in prop::collection::vec(0usize..3, 6)) {
            let labels = [0, 1, 2, 0, 1, 2];
            let m = compute_metrics(&preds, &labels).unwrap();
            prop_assert!((m.weighted_f1 - m.macro_f1).abs() < 1e-12);
        }

        #[test]
        fn decreasing_never_diverges(mut xs in prop::collection::vec(0.0f64..100.0, 0..30)) {
            xs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assert!(!detect_divergence(&xs, DivergenceRule::default()));
        }
    }

    #[test]
    fn divergence_rule() {
        let rule = DivergenceRule::default();
        assert_eq!(divergence_epoch(&[1.0, 0.5, 1.2, 1.3], rule), Some(3));
        assert!(!detect_divergence(&[1.0, 0.5, 1.2, 0.9], rule));
        assert_eq!(divergence_epoch(&[f64::NAN], rule), Some(0));
        assert_eq!(divergence_epoch(&[1.0, f64::INFINITY], rule), Some(1));
    }

    #[test]
    fn aggregation() {
        let run = |acc: f64, diverged| RunMetrics {
            accuracy: acc,
            macro_f1: acc,
            weighted_f1: acc,
            per_class_f1: vec![acc; 3],
            diverged,
        };
        let a = aggregate(&[run(0.7, false), run(0.8, false)]).unwrap();
        assert!((a.accuracy.mean - 0.75).abs() < 1e-15);
        assert!((a.accuracy.std - 0.05).abs() < 1e-15);
        let a = aggregate(&[run(0.6, false), run(0.6, false), run(0.6, false)]).unwrap();
        assert_eq!(a.accuracy.std, 0.0);
        let a = aggregate(&[run(0.7, false), run(0.1, true), run(0.8, false)]).unwrap();
        assert_eq!((a.runs, a.diverged), (2, 1));
        assert!((a.accuracy.mean - 0.75).abs() < 1e-15);
        assert_eq!(aggregate(&[run(0.5, true)]), Err(Error::AllDiverged(1)));
    }
}
