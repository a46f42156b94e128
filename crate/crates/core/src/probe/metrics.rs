use super::Role;
use crate::error::{Error, Result};

/// Confusion-matrix summary of a detector. Rates are percentages and MCC is
/// reported ×100; `None` marks a zero denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DetectionMetrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub precision: Option<f64>,
    pub mcc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

impl DetectionMetrics {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let den = (tp + fp) as f64 * (tp + fn_) as f64 * (tn + fp) as f64 * (tn + fn_) as f64;
        let mcc = (den > 0.0).then(|| {
            100.0 * (tp as f64 * tn as f64 - fp as f64 * fn_ as f64) / libm::sqrt(den)
        });
        Self {
            tp,
            fp,
            tn,
            fn_,
            tpr: ratio(tp, tp + fn_),
            fpr: ratio(fp, fp + tn),
            precision: ratio(tp, tp + fp),
            mcc,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Adds one prediction/label pair.
    pub fn record(&mut self, predicted: Role, actual: Role) {
        match (predicted, actual) {
            (Role::Malicious, Role::Malicious) => self.tp += 1,
            (Role::Malicious, Role::Benign) => self.fp += 1,
            (Role::Benign, Role::Benign) => self.tn += 1,
            (Role::Benign, Role::Malicious) => self.fn_ += 1,
        }
        *self = Self::from_counts(self.tp, self.fp, self.tn, self.fn_);
    }

    /// Pools the counts of two windows.
    pub fn merge(&self, other: &DetectionMetrics) -> Self {
        Self::from_counts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.tn + other.tn,
            self.fn_ + other.fn_,
        )
    }
}

pub fn compute_metrics(predictions: &[Role], labels: &[Role]) -> Result<DetectionMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            context: "compute_metrics",
            expected: (labels.len(), 1),
            found: (predictions.len(), 1),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("compute_metrics"));
    }
    let mut counts = [0u64; 4];
    for (&p, &l) in predictions.iter().zip(labels) {
        let slot = match (p.is_malicious(), l.is_malicious()) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        counts[slot] += 1;
    }
    Ok(DetectionMetrics::from_counts(counts[0], counts[1], counts[2], counts[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn expand(tp: usize, fp: usize, tn: usize, fn_: usize) -> (Vec<Role>, Vec<Role>) {
        use Role::*;
        let mut p = Vec::new();
        let mut l = Vec::new();
        for (n, pr, lb) in [(tp, Malicious, Malicious), (fp, Malicious, Benign), (tn, Benign, Benign), (fn_, Benign, Malicious)] {
            for _ in 0..n {
                p.push(pr);
                l.push(lb);
            }
        }
        (p, l)
    }

    #[test]
    fn reference_confusion_matrix() {
        let (p, l) = expand(9, 1, 8, 2);
        let m = compute_metrics(&p, &l).unwrap();
        assert!((m.tpr.unwrap() - 81.818_181_818_181_82).abs() < 1e-9);
        assert!((m.fpr.unwrap() - 11.111_111_111_111_11).abs() < 1e-9);
        assert!((m.precision.unwrap() - 90.0).abs() < 1e-12);
        // 70 / sqrt(9900)
        assert!((m.mcc.unwrap() - 70.352_647_068_144_6).abs() < 1e-9);
    }

    #[test]
    fn perfect_detector() {
        let (p, l) = expand(5, 0, 7, 0);
        let m = compute_metrics(&p, &l).unwrap();
        assert_eq!((m.tpr, m.fpr, m.precision, m.mcc), (Some(100.0), Some(0.0), Some(100.0), Some(100.0)));
    }

    #[test]
    fn all_benign_predictions_leave_precision_undefined() {
        let (p, l) = expand(0, 0, 4, 3);
        let m = compute_metrics(&p, &l).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.tpr, Some(0.0));
        assert_eq!(m.mcc, None);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[Role::Benign], &[]).is_err());
    }

    #[test]
    fn record_and_merge_agree_with_batch() {
        let (p, l) = expand(3, 2, 4, 1);
        let mut acc = DetectionMetrics::default();
        for (a, b) in p.iter().zip(&l) {
            acc.record(*a, *b);
        }
        assert_eq!(acc, compute_metrics(&p, &l).unwrap());
        let merged = acc.merge(&DetectionMetrics::from_counts(1, 0, 0, 0));
        assert_eq!(merged.tp, 4);
        assert_eq!(DetectionMetrics::default().merge(&DetectionMetrics::default()).tpr, None);
    }
}
