use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};

/// Softmax cross-entropy of one logit row against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} logits", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Index of the largest entry (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn check_pairs(predictions: &[usize], labels: &[usize], classes: usize) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::invalid(format!("class {bad} out of range 0..{classes}")));
    }
    Ok(())
}

fn counts(predictions: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut table = vec![vec![0usize; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        table[l][p] += 1;
    }
    table
}

/// Per-class precision, recall and F1; an empty denominator scores 0.
pub fn class_stats(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<ClassStats>> {
    check_pairs(predictions, labels, classes)?;
    let table = counts(predictions, labels, classes);
    Ok((0..classes)
        .map(|c| {
            let tp = table[c][c] as f64;
            let support: usize = table[c].iter().sum();
            let predicted: usize = table.iter().map(|row| row[c]).sum();
            let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassStats {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("weighted F1 of an empty set"));
    }
    let stats = class_stats(predictions, labels, classes)?;
    let total: usize = stats.iter().map(|s| s.support).sum();
    Ok(stats.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / total as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// `classes × classes` confusion matrix, rows = actual class, each row with
/// support normalized to sum 1 (rows without support stay zero).
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Array> {
    check_pairs(predictions, labels, classes)?;
    let table = counts(predictions, labels, classes);
    let mut out = Array::zeros(&[classes, classes]);
    for (r, row) in table.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support > 0 {
            for (c, &n) in row.iter().enumerate() {
                out.set(r, c, n as f64 / support as f64);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_cases() {
        let uniform = [0.3; 7];
        for label in 0..7 {
            assert!((cross_entropy(&uniform, label).unwrap() - 7f64.ln()).abs() < 1e-12);
        }
        let mut logits = [0.0; 7];
        logits[0] = 2.0;
        let expected = (2f64.exp() + 6.0).ln() - 2.0;
        assert!((cross_entropy(&logits, 0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.594438).abs() < 1e-6);
        assert!(cross_entropy(&logits, 7).is_err());
        assert!(cross_entropy(&[1000.0, 0.0], 0).unwrap().is_finite());
    }

    #[test]
    fn raising_true_logit_lowers_loss() {
        let mut logits = vec![0.5, -0.2, 1.0];
        let mut last = cross_entropy(&logits, 1).unwrap();
        for _ in 0..20 {
            logits[1] += 0.5;
            let now = cross_entropy(&logits, 1).unwrap();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn worked_two_class_example() {
        let labels = [0, 0, 0, 1];
        let preds = [0, 0, 0, 0];
        let stats = class_stats(&preds, &labels, 2).unwrap();
        // precision 3/4, recall 1 → F1 = 6/7
        assert!((stats[0].f1 - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(stats[1].f1, 0.0);
        let wf1 = weighted_f1(&preds, &labels, 2).unwrap();
        assert!((wf1 - 0.642857).abs() < 1e-6);
        assert!((wf1 - 4.5 / 7.0).abs() < 1e-12);
        let cm = confusion_matrix(&preds, &labels, 2).unwrap();
        assert_eq!(cm.data(), [1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let labels = [0, 1, 2, 3, 4, 5, 6, 0, 0];
        assert_eq!(weighted_f1(&labels, &labels, 7).unwrap(), 1.0);
        let cm = confusion_matrix(&labels, &labels, 7).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                assert_eq!(cm.at(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
        let constant = [3; 9];
        let cm = confusion_matrix(&constant, &labels, 7).unwrap();
        for r in 0..7 {
            assert_eq!(cm.at(r, 3), 1.0);
            assert_eq!(cm.row_slice(r).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn mismatched_inputs_are_errors() {
        assert!(weighted_f1(&[0], &[0, 1], 2).is_err());
        assert!(weighted_f1(&[2], &[0], 2).is_err());
        assert!(weighted_f1(&[], &[], 2).is_err());
    }

    #[test]
    fn random_predictions_spread_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 70_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 7).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
        let cm = confusion_matrix(&preds, &labels, 7).unwrap();
        let p = 1.0 / 7.0;
        let sigma = (p * (1.0 - p) / (n / 7) as f64).sqrt();
        for v in cm.data() {
            assert!((v - p).abs() <= 3.0 * sigma, "{v}");
        }
    }

    proptest! {
        #[test]
        fn weighted_f1_is_permutation_invariant(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
            perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let before = weighted_f1(&preds, &labels, 4).unwrap();
            let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
            let after = weighted_f1(&relabel(&preds), &relabel(&labels), 4).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&before));
        }

        #[test]
        fn confusion_rows_sum_to_one(pairs in proptest::collection::vec((0usize..7, 0usize..7), 1..80)) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let cm = confusion_matrix(&preds, &labels, 7).unwrap();
            for r in 0..7 {
                let s: f64 = cm.row_slice(r).iter().sum();
                if labels.contains(&r) {
                    prop_assert!((s - 1.0).abs() < 1e-9);
                } else {
                    prop_assert_eq!(s, 0.0);
                }
            }
        }
    }
}
