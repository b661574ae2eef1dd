//! Ranking metrics over per-step anomaly scores: AUROC via the
//! Mann-Whitney statistic (ties counted at half weight), AUPRC as
//! step-wise average precision, and the best F1 over 1,000 thresholds
//! spread uniformly from zero to the maximum score.

use serde::{Deserialize, Serialize};

use crate::error::{RaemepcError, Result};

/// Scores paired with ground-truth anomaly flags.
#[derive(Debug, Clone)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(RaemepcError::Shape(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(RaemepcError::Argument("empty score set".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(RaemepcError::Numerical("non-finite score".into()));
        }
        Ok(Self { scores, labels })
    }

    fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }
}

/// Probability that a random positive outscores a random negative, ties at
/// half weight; computed by rank summation so the arithmetic stays exact.
pub fn auroc(ls: &LabeledScores) -> Result<f64> {
    let n_pos = ls.positives();
    let n_neg = ls.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(RaemepcError::UndefinedMetric(
            "AUROC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..ls.scores.len()).collect();
    order.sort_by(|&a, &b| ls.scores[a].partial_cmp(&ls.scores[b]).unwrap());

    // Twice the rank sum of positives, using doubled average ranks so tie
    // groups contribute integers.
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && ls.scores[order[j]] == ls.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share the doubled average rank (i+1)+j.
        let doubled_rank = (i + 1 + j) as u64;
        for &idx in &order[i..j] {
            if ls.labels[idx] {
                rank_sum_x2 += doubled_rank;
            }
        }
        i = j;
    }
    let numer = rank_sum_x2 - (n_pos as u64) * (n_pos as u64 + 1);
    Ok(numer as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Average precision: precision summed over recall increments, one step
/// per distinct score value from the top down.
pub fn auprc(ls: &LabeledScores) -> Result<f64> {
    let n_pos = ls.positives();
    if n_pos == 0 {
        return Err(RaemepcError::UndefinedMetric(
            "AUPRC needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..ls.scores.len()).collect();
    order.sort_by(|&a, &b| ls.scores[b].partial_cmp(&ls.scores[a]).unwrap());

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && ls.scores[order[j]] == ls.scores[order[i]] {
            if ls.labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Number of thresholds in the F1 sweep.
pub const F1_SWEEP_STEPS: usize = 1000;

/// Maximum F1 over `F1_SWEEP_STEPS` thresholds `i * max_score / 999` for
/// `i = 0..=999`, flagging `score >= threshold`. Ties resolve toward the
/// lowest threshold. Returns `(f1, threshold)`.
pub fn best_f1(ls: &LabeledScores) -> Result<(f64, f64)> {
    let n_pos = ls.positives();
    if n_pos == 0 {
        return Err(RaemepcError::UndefinedMetric(
            "best F1 needs at least one positive".into(),
        ));
    }
    let max_score = ls.scores.iter().cloned().fold(f64::MIN, f64::max);
    let mut best = (-1.0, 0.0);
    for i in 0..F1_SWEEP_STEPS {
        let thr = i as f64 * max_score / (F1_SWEEP_STEPS - 1) as f64;
        let (f1, _, _, _) = f1_at(ls, thr);
        if f1 > best.0 {
            best = (f1, thr);
        }
    }
    Ok(best)
}

/// F1, precision, recall, and confusion counts at one threshold
/// (prediction rule: `score >= threshold`).
pub fn f1_at(ls: &LabeledScores, threshold: f64) -> (f64, f64, f64, [usize; 4]) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (s, l) in ls.scores.iter().zip(&ls.labels) {
        match (*s >= threshold, *l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    (f1, precision, recall, [tp, fp, tn, fn_])
}

/// Full metric summary for one scored series.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub auroc: f64,
    pub auprc: f64,
    pub best_f1: f64,
    pub best_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn evaluate(ls: &LabeledScores) -> Result<MetricReport> {
    let auroc = auroc(ls)?;
    let auprc = auprc(ls)?;
    let (f1, thr) = best_f1(ls)?;
    let (_, precision, recall, [tp, fp, tn, fn_]) = f1_at(ls, thr);
    Ok(MetricReport {
        auroc,
        auprc,
        best_f1: f1,
        best_threshold: thr,
        precision,
        recall,
        tp,
        fp,
        tn,
        fn_,
    })
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "auroc,auprc,best_f1,best_threshold,precision,recall,tp,fp,tn,fn"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.auroc,
            self.auprc,
            self.best_f1,
            self.best_threshold,
            self.precision,
            self.recall,
            self.tp,
            self.fp,
            self.tn,
            self.fn_
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ls(scores: Vec<f64>, labels: Vec<bool>) -> LabeledScores {
        LabeledScores::new(scores, labels).unwrap()
    }

    /// All-pairs AUROC: wins plus half-ties over all positive/negative
    /// pairs. Quadratic; oracle use only.
    fn auroc_pairwise(ls: &LabeledScores) -> f64 {
        let pos: Vec<f64> = ls
            .scores
            .iter()
            .zip(&ls.labels)
            .filter(|(_, l)| **l)
            .map(|(s, _)| *s)
            .collect();
        let neg: Vec<f64> = ls
            .scores
            .iter()
            .zip(&ls.labels)
            .filter(|(_, l)| !**l)
            .map(|(s, _)| *s)
            .collect();
        let mut num = 0u64; // doubled: win = 2, tie = 1
        for p in &pos {
            for n in &neg {
                if p > n {
                    num += 2;
                } else if p == n {
                    num += 1;
                }
            }
        }
        num as f64 / (2.0 * pos.len() as f64 * neg.len() as f64)
    }

    #[test]
    fn perfect_ranking_gives_one() {
        let s = ls(vec![0.1, 0.9], vec![false, true]);
        assert_eq!(auroc(&s).unwrap(), 1.0);
        assert_eq!(auprc(&s).unwrap(), 1.0);
        assert_eq!(best_f1(&s).unwrap().0, 1.0);
    }

    #[test]
    fn constant_scores_give_half_auroc_and_base_rate_auprc() {
        let s = ls(vec![0.5; 10], {
            let mut l = vec![false; 10];
            l[0] = true;
            l[3] = true;
            l[7] = true;
            l
        });
        assert_eq!(auroc(&s).unwrap(), 0.5);
        assert!((auprc(&s).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn all_positive_labels_reach_f1_one_at_zero_threshold() {
        let s = ls(vec![0.0, 1.0, 2.0], vec![true, true, true]);
        let (f1, thr) = best_f1(&s).unwrap();
        assert_eq!(f1, 1.0);
        assert_eq!(thr, 0.0);
    }

    #[test]
    fn single_class_is_undefined() {
        let s = ls(vec![0.1, 0.2], vec![false, false]);
        assert!(matches!(auroc(&s), Err(RaemepcError::UndefinedMetric(_))));
        assert!(matches!(auprc(&s), Err(RaemepcError::UndefinedMetric(_))));
        assert!(matches!(best_f1(&s), Err(RaemepcError::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.gen_range(5..120);
            // Coarse quantization forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let s = ls(scores, labels);
            assert_eq!(auroc(&s).unwrap(), auroc_pairwise(&s), "exact match expected");
        }
    }

    #[test]
    fn label_swap_mirrors_auroc() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let n = 60;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auroc(&ls(scores.clone(), labels.clone())).unwrap();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let b = auroc(&ls(scores, flipped)).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn best_f1_ties_break_toward_lowest_threshold() {
        // Any threshold in (0, 1] yields the same confusion counts here;
        // the sweep must return the smallest one evaluated, which is 0
        // (everything flagged) only if that F1 is strictly better.
        let s = ls(vec![0.0, 1.0], vec![false, true]);
        let (f1, thr) = best_f1(&s).unwrap();
        assert_eq!(f1, 1.0);
        // Threshold 0 flags both (f1 = 2/3); the first improving threshold
        // is the smallest positive sweep value.
        assert!(thr > 0.0);
        assert!((thr - 1.0 / 999.0).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn auroc_invariant_under_monotone_transform(
            raw in proptest::collection::vec((0.0f64..10.0, any::<bool>()), 6..80),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let mut labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            labels[0] = true;
            labels[1] = false;
            let base = auroc(&ls(scores.clone(), labels.clone())).unwrap();
            // exp is strictly monotone; 2x + 1 as well.
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.5).exp()).collect();
            let t1 = auroc(&ls(transformed, labels.clone())).unwrap();
            prop_assert!((base - t1).abs() < 1e-12);
            let affine: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
            let t2 = auroc(&ls(affine, labels)).unwrap();
            prop_assert!((base - t2).abs() < 1e-12);
        }

        #[test]
        fn metrics_stay_in_unit_interval(
            raw in proptest::collection::vec((0.0f64..5.0, any::<bool>()), 6..60),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let mut labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            labels[0] = true;
            labels[1] = false;
            let s = ls(scores, labels);
            let r = evaluate(&s).unwrap();
            for v in [r.auroc, r.auprc, r.best_f1, r.precision, r.recall] {
                prop_assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
            }
        }
    }
}
