//! Accuracy, rank AUC and F1.

use serde::Serialize;

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
}

/// Mann-Whitney AUC: the probability a random positive outscores a random
/// negative, ties counted half. `None` without both classes present.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tie blocks, 1-based.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// Unweighted mean of per-class F1 over the classes that occur in the truth
/// or in the predictions.
pub fn macro_f1(predicted: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let scores: Vec<f64> = (0..classes).filter_map(|k| f1_from_counts(tp[k], fp[k], fn_[k])).collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best })
}

/// Metrics for `n × C` class probabilities against true labels: argmax
/// accuracy, macro F1, and macro one-vs-rest AUC over the classes that have
/// both positives and negatives (0.5 when none do).
pub fn classification_metrics(probs: &Tensor, truth: &[usize]) -> Metrics {
    let classes = probs.cols();
    let predicted: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
    let aucs: Vec<f64> = (0..classes)
        .filter_map(|k| {
            let column: Vec<f64> = (0..probs.rows()).map(|i| probs.get(i, k)).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == k).collect();
            rank_auc(&column, &positive)
        })
        .collect();
    let auc = if aucs.is_empty() { 0.5 } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };
    Metrics { acc: accuracy(&predicted, truth), auc, f1: macro_f1(&predicted, truth, classes) }
}

/// Metrics for binary scores: a score above 0.5 predicts positive; F1 is
/// that of the positive class (0 when it is never predicted nor present).
pub fn binary_metrics(scores: &[f64], positive: &[bool]) -> Metrics {
    assert_eq!(scores.len(), positive.len());
    let (mut tp, mut fp, mut fn_, mut correct) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(positive) {
        let pred = s > 0.5;
        match (pred, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        if pred == y {
            correct += 1;
        }
    }
    let acc = if scores.is_empty() { 0.0 } else { correct as f64 / scores.len() as f64 };
    Metrics {
        acc,
        auc: rank_auc(scores, positive).unwrap_or(0.5),
        f1: f1_from_counts(tp, fp, fn_).unwrap_or(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
        let (mut wins, mut pairs) = (0.0, 0usize);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        (pairs > 0).then(|| wins / pairs as f64)
    }

    #[test]
    fn constant_scorer_has_half_auc() {
        let s = vec![0.5; 10];
        let y: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        assert_eq!(rank_auc(&s, &y), Some(0.5));
        assert_eq!(binary_metrics(&s, &y).acc, 0.5);
        assert_eq!(rank_auc(&s, &[true; 10]), None);
    }

    #[test]
    fn perfect_class_scores() {
        let truth = vec![0, 2, 1, 2];
        let probs = Tensor::from_rows(
            &truth.iter().map(|&t| (0..3).map(|k| if k == t { 1.0 } else { 0.0 }).collect()).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(classification_metrics(&probs, &truth), Metrics { acc: 1.0, auc: 1.0, f1: 1.0 });
    }

    #[test]
    fn ground_truth_indicator_is_perfect() {
        let y = [true, false, true, false];
        let s: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(binary_metrics(&s, &y), Metrics { acc: 1.0, auc: 1.0, f1: 1.0 });
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(raw in prop::collection::vec((0u8..6, any::<bool>()), 2..50)) {
            // coarse scores force plenty of ties
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
            let y: Vec<bool> = raw.iter().map(|(_, b)| *b).collect();
            match (rank_auc(&scores, &y), pairwise_auc(&scores, &y)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn order_invariant(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..30), rot in 0usize..30) {
            let s: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let y: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let k = rot % s.len();
            let (mut s2, mut y2) = (s.clone(), y.clone());
            s2.rotate_left(k);
            y2.rotate_left(k);
            let a = binary_metrics(&s, &y);
            let b = binary_metrics(&s2, &y2);
            prop_assert!((a.acc - b.acc).abs() < 1e-15 && (a.auc - b.auc).abs() < 1e-12 && a.f1 == b.f1);
        }
    }
}
