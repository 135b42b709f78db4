//! Label-smoothed cross entropy and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { epsilon: 0.1 }
    }
}

/// Loss and softmax probabilities for one logit row.
///
/// q_k = (1-eps) * [k == target] + eps / C;
/// loss = -sum_k q_k * log_softmax(logits)_k.
pub fn smoothed_ce_forward<T: Scalar>(logits: &[T], target: usize, epsilon: f64) -> (T, Vec<T>) {
    let classes = logits.len();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let log_z = logits
        .iter()
        .map(|&l| (l - max).exp())
        .sum::<T>()
        .ln()
        + max;
    let uniform: T = cast(epsilon / classes as f64);
    let confident: T = cast(1.0 - epsilon);
    let mut loss = T::zero();
    let mut probs = Vec::with_capacity(classes);
    for (k, &l) in logits.iter().enumerate() {
        let log_p = l - log_z;
        probs.push(log_p.exp());
        let mut q = uniform;
        if k == target {
            q += confident;
        }
        loss -= q * log_p;
    }
    (loss, probs)
}

/// Plain-value variant used by tests and the re-ranking pipeline.
pub fn label_smoothed_ce(logits: &[f64], target: usize, epsilon: f64) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!(
            "smoothing factor must be in [0, 1), got {epsilon}"
        )));
    }
    Ok(smoothed_ce_forward(logits, target, epsilon).0)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "accuracy needs equal non-empty inputs, got {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Row = gold class, column = predicted class.
pub fn confusion_matrix(preds: &[usize], golds: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != golds.len() {
        return Err(Error::Shape(format!(
            "confusion_matrix needs equal lengths, got {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= classes || g >= classes {
            return Err(Error::Index(format!(
                "label out of range: pred {p}, gold {g}, classes {classes}"
            )));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// Per-class F1 from a confusion matrix. 0/0 counts as 0 throughout, so
/// classes absent from both predictions and golds contribute 0 to the
/// unweighted macro average.
pub fn f1_from_confusion(confusion: &[Vec<usize>]) -> Vec<f64> {
    let classes = confusion.len();
    (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let fp: usize = (0..classes).filter(|&g| g != c).map(|g| confusion[g][c]).sum();
            let fn_: usize = (0..classes).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
            let precision = ratio_or_zero(tp, tp + fp);
            let recall = ratio_or_zero(tp, tp + fn_);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect()
}

fn ratio_or_zero(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Unweighted mean of per-class F1 over all `classes` classes.
pub fn macro_f1(preds: &[usize], golds: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    if classes == 0 {
        return Err(Error::Config("macro_f1 requires at least one class".into()));
    }
    let confusion = confusion_matrix(preds, golds, classes)?;
    let per_class = f1_from_confusion(&confusion);
    let macro_f1 = per_class.iter().sum::<f64>() / classes as f64;
    Ok((macro_f1, per_class))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
}

impl MetricsReport {
    pub fn compute(preds: &[usize], golds: &[usize], classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("metrics require at least one class".into()));
        }
        let confusion = confusion_matrix(preds, golds, classes)?;
        let per_class_f1 = f1_from_confusion(&confusion);
        let macro_f1 = per_class_f1.iter().sum::<f64>() / classes as f64;
        let support: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
        Ok(MetricsReport {
            accuracy: accuracy(preds, golds)?,
            macro_f1,
            per_class_f1,
            confusion,
            support,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_logits_give_ln_c() {
        // Any valid q against uniform logits costs ln C.
        let loss = label_smoothed_ce(&[0.0, 0.0], 0, 0.1).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
        let loss = label_smoothed_ce(&[3.0; 5], 2, 0.2).unwrap();
        assert_abs_diff_eq!(loss, 5.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_smoothing_is_standard_cross_entropy() {
        let logits = [0.3, -1.2, 2.0];
        let loss = label_smoothed_ce(&logits, 1, 0.0).unwrap();
        let p = softmax(&logits);
        assert_abs_diff_eq!(loss, -p[1].ln(), epsilon = 1e-12);
    }

    #[test]
    fn frozen_worked_value() {
        // High-precision evaluation of the definition for
        // C=2, eps=0.1, logits [ln 3, 0], target 0 (q = [0.95, 0.05]).
        let loss = label_smoothed_ce(&[3.0f64.ln(), 0.0], 0, 0.1).unwrap();
        assert_abs_diff_eq!(loss, 0.3426126868851863, epsilon = 1e-12);
    }

    #[test]
    fn target_out_of_range_is_index_error() {
        assert!(matches!(
            label_smoothed_ce(&[0.0, 0.0], 2, 0.1),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn shift_invariance() {
        let mut rng = RngState::new(17);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..7).map(|_| rng.next_f64() * 8.0 - 4.0).collect();
            let shift = rng.next_f64() * 20.0 - 10.0;
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let a = label_smoothed_ce(&logits, 3, 0.1).unwrap();
            let b = label_smoothed_ce(&shifted, 3, 0.1).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn gibbs_inequality() {
        // loss >= H(q), equality iff softmax(logits) == q.
        let mut rng = RngState::new(23);
        let classes = 6;
        let eps = 0.1;
        let q: Vec<f64> = (0..classes)
            .map(|k| if k == 2 { 0.9 + eps / 6.0 } else { eps / 6.0 })
            .collect();
        let h_q: f64 = -q.iter().map(|&p| p * p.ln()).sum::<f64>();
        for _ in 0..200 {
            let logits: Vec<f64> = (0..classes).map(|_| rng.next_f64() * 6.0 - 3.0).collect();
            let loss = label_smoothed_ce(&logits, 2, eps).unwrap();
            assert!(loss >= h_q - 1e-12, "Gibbs violated: {loss} < {h_q}");
        }
        // Equality case: logits = ln q (up to a shift).
        let logits: Vec<f64> = q.iter().map(|&p| p.ln()).collect();
        let loss = label_smoothed_ce(&logits, 2, eps).unwrap();
        assert_abs_diff_eq!(loss, h_q, epsilon = 1e-12);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 2], &[0, 0, 1, 2]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn macro_f1_hand_case() {
        // Brute-force confusion counts by hand: F1 = [2/3, 2/3, 1].
        let (m, per) = macro_f1(&[0, 1, 1, 2], &[0, 0, 1, 2], 3).unwrap();
        assert_abs_diff_eq!(per[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(per[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(per[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m, 7.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let (m, per) = macro_f1(&[0, 0, 0], &[0, 0, 0], 2).unwrap();
        assert_eq!(per, vec![1.0, 0.0]);
        assert_abs_diff_eq!(m, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let (m, _) = macro_f1(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_abs_diff_eq!(m, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn macro_f1_invariant_under_relabeling() {
        let mut rng = RngState::new(31);
        let classes = 5;
        let perm = [3usize, 0, 4, 1, 2];
        for _ in 0..20 {
            let preds: Vec<usize> = (0..60).map(|_| rng.gen_index(classes)).collect();
            let golds: Vec<usize> = (0..60).map(|_| rng.gen_index(classes)).collect();
            let (m1, _) = macro_f1(&preds, &golds, classes).unwrap();
            let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
            let gg: Vec<usize> = golds.iter().map(|&g| perm[g]).collect();
            let (m2, _) = macro_f1(&pp, &gg, classes).unwrap();
            assert_abs_diff_eq!(m1, m2, epsilon = 1e-12);
        }
    }

    #[test]
    fn confusion_matches_tally_oracle() {
        let mut rng = RngState::new(37);
        let classes = 7;
        let preds: Vec<usize> = (0..1000).map(|_| rng.gen_index(classes)).collect();
        let golds: Vec<usize> = (0..1000).map(|_| rng.gen_index(classes)).collect();
        let m = confusion_matrix(&preds, &golds, classes).unwrap();
        // Independent tally.
        let mut tally = vec![vec![0usize; classes]; classes];
        for i in 0..1000 {
            tally[golds[i]][preds[i]] += 1;
        }
        assert_eq!(m, tally);
        // accuracy == trace / total
        let trace: usize = (0..classes).map(|c| m[c][c]).sum();
        let total: usize = m.iter().flatten().sum();
        assert_abs_diff_eq!(
            accuracy(&preds, &golds).unwrap(),
            trace as f64 / total as f64,
            epsilon = 1e-15
        );
    }

    #[test]
    fn single_example_confusion() {
        let m = confusion_matrix(&[2], &[1], 3).unwrap();
        assert_eq!(m[1][2], 1);
        assert_eq!(m.iter().flatten().sum::<usize>(), 1);
    }

    #[test]
    fn report_invariants() {
        let report = MetricsReport::compute(&[0, 1, 1, 2], &[0, 0, 1, 2], 3).unwrap();
        assert_eq!(report.support, vec![2, 1, 1]);
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, 4);
        let mean = report.per_class_f1.iter().sum::<f64>() / 3.0;
        assert_abs_diff_eq!(report.macro_f1, mean, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_labels_rejected() {
        assert!(matches!(
            confusion_matrix(&[3], &[0], 3),
            Err(Error::Index(_))
        ));
        assert!(matches!(macro_f1(&[0], &[0], 0), Err(Error::Config(_))));
    }
}
