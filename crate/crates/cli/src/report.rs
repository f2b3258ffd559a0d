use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use glyphscope::train::{ConfusionMatrix, EpochRecord, MetricsReport};
use serde::Serialize;

pub const CSV_HEADER: &str = "fold,precision,recall,f1,accuracy";

/// One evaluated split: a cross-validation fold, a holdout or a test set.
#[derive(Debug, Clone, Serialize)]
pub struct SplitReport {
    /// Fold number, `"holdout"` or `"test"`.
    pub split: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn mean(reports: &[&MetricsReport]) -> MeanMetrics {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    MeanMetrics {
        precision: avg(|r| r.macro_precision),
        recall: avg(|r| r.macro_recall),
        f1: avg(|r| r.macro_f1),
        accuracy: avg(|r| r.accuracy),
    }
}

/// The per-split table: fold id, macro precision, recall, F1 and accuracy.
pub fn metrics_csv(splits: &[SplitReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for s in splits {
        let m = &s.metrics;
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            s.split, m.macro_precision, m.macro_recall, m.macro_f1, m.accuracy
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Human-readable summary for the terminal.
pub fn table(splits: &[SplitReport]) -> String {
    let mut out = format!(
        "{:<8} {:>9} {:>9} {:>9} {:>9}\n",
        "split", "precision", "recall", "f1", "accuracy"
    );
    for s in splits {
        let m = &s.metrics;
        writeln!(
            out,
            "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            s.split, m.macro_precision, m.macro_recall, m.macro_f1, m.accuracy
        )
        .expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use glyphscope::train::metric_defs;

    fn split(name: &str, pairs: &[(usize, usize)]) -> SplitReport {
        let confusion = ConfusionMatrix::from_pairs(3, pairs.iter().copied());
        SplitReport {
            split: name.into(),
            metrics: metric_defs(&confusion),
            confusion,
            best_epoch: None,
            history: Vec::new(),
        }
    }

    #[test]
    fn csv_layout() {
        let csv = metrics_csv(&[split("1", &[(0, 0), (1, 1), (2, 2)]), split("2", &[(0, 0), (1, 0)])]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fold,precision,recall,f1,accuracy");
        assert_eq!(lines[1], "1,1.000000,1.000000,1.000000,1.000000");
        assert_eq!(lines[2], "2,0.166667,0.333333,0.222222,0.500000");
    }

    #[test]
    fn mean_of_reports() {
        let a = split("1", &[(0, 0)]);
        let b = split("2", &[(0, 1)]);
        let m = mean(&[&a.metrics, &b.metrics]);
        assert_eq!(m.accuracy, 0.5);
    }
}
