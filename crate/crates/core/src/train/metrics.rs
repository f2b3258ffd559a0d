use serde::{Deserialize, Serialize};

/// Square count grid, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = Self::new(classes);
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, v) in row.iter_mut().zip(o) {
                *c += v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when the class was never predicted, so precision is 0 by convention.
    pub precision_undefined: bool,
    /// Set when the class never occurs, so recall is 0 by convention.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold_id: Option<usize>,
    pub averaging: String,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Per-class precision, recall and F1 with unweighted (macro) means.
/// Zero denominators give 0 and set the matching flag.
pub fn metric_defs(cm: &ConfusionMatrix) -> MetricsReport {
    let n = cm.classes();
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|c| {
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..n).map(|r| cm.counts[r][c]).sum();
            let support: u64 = cm.counts[c].iter().sum();
            let (precision, precision_undefined) = ratio(tp, predicted);
            let (recall, recall_undefined) = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;
    MetricsReport {
        fold_id: None,
        averaging: "macro".into(),
        accuracy: ratio(cm.trace(), cm.total()).0,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix {
            counts: vec![vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 7]],
        };
        let r = metric_defs(&cm);
        assert_eq!(
            (r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn two_class_hand_example() {
        let cm = ConfusionMatrix {
            counts: vec![vec![1, 1], vec![0, 2]],
        };
        let r = metric_defs(&cm);
        assert!((r.macro_precision - 5.0 / 6.0).abs() < 1e-15);
        assert!((r.macro_recall - 0.75).abs() < 1e-15);
    }

    #[test]
    fn uniform_matrix() {
        let cm = ConfusionMatrix {
            counts: vec![vec![5; 3]; 3],
        };
        let r = metric_defs(&cm);
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        for c in &r.per_class {
            assert!((c.precision - 1.0 / 3.0).abs() < 1e-15);
            assert!((c.recall - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_predicted_class() {
        // truths 2/3/5 all predicted as class 1
        let cm = ConfusionMatrix {
            counts: vec![vec![0, 2, 0], vec![0, 3, 0], vec![0, 5, 0]],
        };
        let r = metric_defs(&cm);
        assert!((r.per_class[1].precision - 0.3).abs() < 1e-15);
        assert_eq!(r.per_class[0].precision, 0.0);
        assert!(r.per_class[0].precision_undefined);
        assert_eq!(r.per_class[2].precision, 0.0);
        assert_eq!(r.per_class[1].recall, 1.0);
    }

    #[test]
    fn absent_class_is_flagged() {
        let cm = ConfusionMatrix::from_pairs(3, [(0, 0), (1, 1)]);
        let r = metric_defs(&cm);
        let c = &r.per_class[2];
        assert_eq!((c.precision, c.recall, c.f1), (0.0, 0.0, 0.0));
        assert!(c.precision_undefined && c.recall_undefined);
    }

    proptest! {
        #[test]
        fn f1_between_precision_and_recall(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..100)) {
            let r = metric_defs(&ConfusionMatrix::from_pairs(3, pairs));
            for c in &r.per_class {
                let lo = c.precision.min(c.recall);
                let hi = c.precision.max(c.recall);
                prop_assert!(c.f1 >= lo - 1e-12 && c.f1 <= hi + 1e-12);
            }
            let mp = r.per_class.iter().map(|c| c.precision).sum::<f64>() / 3.0;
            prop_assert_eq!(mp, r.macro_precision);
        }
    }
}
