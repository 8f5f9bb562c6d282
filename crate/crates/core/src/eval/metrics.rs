//! Confusion matrices and the classification metrics derived from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::CLASS_NAMES;
use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
            class_names: (0..classes)
                .map(|k| CLASS_NAMES.get(k).map_or_else(|| format!("class{k}"), |s| s.to_string()))
                .collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn predicted(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }

    /// Element-wise sum, for pooling folds.
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Evaluation(format!(
                "cannot add {}-class and {}-class confusion matrices",
                self.classes(),
                other.classes()
            )));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Evaluation(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::Label {
                label: t.max(p),
                classes,
            });
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Per-class true-positive rate; `None` for classes without true samples.
pub fn tpr(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes())
        .map(|k| {
            let s = cm.support(k);
            (s > 0).then(|| cm.counts[k][k] as f64 / s as f64)
        })
        .collect()
}

/// Mean TPR over classes that occur. Classes with no true samples are left
/// out of the mean (with a warning); an empty matrix yields 0.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> f64 {
    let rates = tpr(cm);
    let present: Vec<f64> = rates.iter().flatten().copied().collect();
    if present.len() < rates.len() {
        log::warn!(
            "{} class(es) without true samples excluded from balanced accuracy",
            rates.len() - present.len()
        );
    }
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Unweighted mean of per-class F1; a class with precision + recall = 0
/// contributes 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let k = cm.classes();
    if k == 0 {
        return 0.0;
    }
    // 2PR / (P + R) written over counts: one rounding per class.
    let f1s = (0..k).map(|c| {
        let tp = cm.counts[c][c];
        let denom = cm.predicted(c) + cm.support(c);
        if tp > 0 {
            (2 * tp) as f64 / denom as f64
        } else {
            0.0
        }
    });
    f1s.sum::<f64>() / k as f64
}

/// Which data a report was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    /// Test split of the target set.
    TargetTest,
    /// Validation split of the target set.
    TargetValidation,
    /// Label-balanced holdout of the task-related set.
    TaskHoldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fold: Option<usize>,
    pub dataset: EvalSet,
    pub balanced_accuracy: f64,
    pub tpr: Vec<Option<f64>>,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    pub fn from_confusion(cm: ConfusionMatrix, fold: Option<usize>, dataset: EvalSet) -> Self {
        Self {
            fold,
            dataset,
            balanced_accuracy: balanced_accuracy(&cm),
            tpr: tpr(&cm),
            macro_f1: macro_f1(&cm),
            confusion: cm,
        }
    }
}

/// Mean and sample standard deviation (n - 1); the deviation is 0 for a
/// single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Cross-fold summary of one strategy. BAcc and F1 are computed per fold and
/// then averaged; per-class TPRs come from the pooled confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub strategy: String,
    pub folds: Vec<MetricReport>,
    pub balanced_accuracy: (f64, f64),
    pub macro_f1: (f64, f64),
    pub pooled_tpr: Vec<Option<f64>>,
    /// Holdout BAcc on the task-related set, when the strategy has one.
    pub task_holdout_balanced_accuracy: Option<(f64, f64)>,
    pub task_holdout: Vec<MetricReport>,
}

impl AggregateReport {
    pub fn new(strategy: &str, folds: Vec<MetricReport>, task_holdout: Vec<MetricReport>) -> Result<Self> {
        let first = folds.first().ok_or_else(|| Error::Evaluation("no fold reports to aggregate".into()))?;
        let mut pooled = ConfusionMatrix::zeros(first.confusion.classes());
        for f in &folds {
            pooled.add(&f.confusion)?;
        }
        let bacc: Vec<f64> = folds.iter().map(|f| f.balanced_accuracy).collect();
        let f1: Vec<f64> = folds.iter().map(|f| f.macro_f1).collect();
        let hold: Vec<f64> = task_holdout.iter().map(|f| f.balanced_accuracy).collect();
        Ok(Self {
            strategy: strategy.to_string(),
            balanced_accuracy: mean_std(&bacc),
            macro_f1: mean_std(&f1),
            pooled_tpr: tpr(&pooled),
            task_holdout_balanced_accuracy: (!hold.is_empty()).then(|| mean_std(&hold)),
            folds,
            task_holdout,
        })
    }
}

fn pct(x: (f64, f64)) -> String {
    format!("{:.2} ± {:.2}", 100.0 * x.0, 100.0 * x.1)
}

/// Aligned text table, one row per strategy, values in percent.
pub fn report_table(reports: &[AggregateReport]) -> String {
    let classes = reports.first().map_or(0, |r| r.pooled_tpr.len());
    let names: Vec<String> = reports
        .first()
        .and_then(|r| r.folds.first())
        .map(|f| f.confusion.class_names.clone())
        .unwrap_or_default();
    let mut header = vec!["Strategy".to_string(), "BAcc_T".to_string()];
    header.extend((0..classes).map(|k| format!("TPR_{}", names.get(k).cloned().unwrap_or_else(|| k.to_string()))));
    header.push("F1_T".into());
    header.push("BAcc_D".into());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.strategy.clone(), pct(r.balanced_accuracy)];
            row.extend(r.pooled_tpr.iter().map(|t| t.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))));
            row.push(pct(r.macro_f1));
            row.push(r.task_holdout_balanced_accuracy.map_or("-".into(), pct));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&rule, &mut out);
    for r in &rows {
        line(r, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: [[u64; 3]; 3]) -> ConfusionMatrix {
        let mut c = ConfusionMatrix::zeros(3);
        c.counts = rows.iter().map(|r| r.to_vec()).collect();
        c
    }

    #[test]
    fn hand_counted_confusion() {
        let c = confusion(&[0, 0, 1, 2], &[0, 1, 1, 0], 3).unwrap();
        assert_eq!(c.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 0]]);
        assert_eq!(c.total(), 4);
        assert!(matches!(confusion(&[0], &[0, 1], 3), Err(Error::Evaluation(_))));
    }

    #[test]
    fn balanced_accuracy_cases() {
        assert_eq!(balanced_accuracy(&cm([[3, 0, 0], [0, 4, 0], [0, 0, 5]])), 1.0);
        assert_eq!(balanced_accuracy(&cm([[1, 1, 0], [0, 2, 2], [3, 0, 3]])), 0.5);
        let b = balanced_accuracy(&cm([[8, 2, 0], [1, 7, 2], [0, 3, 7]]));
        assert!((b - (0.8 + 0.7 + 0.7) / 3.0).abs() < 1e-15);
        // a class with no true samples is left out
        assert_eq!(balanced_accuracy(&cm([[2, 0, 0], [0, 0, 0], [0, 1, 1]])), 0.75);
    }

    #[test]
    fn macro_f1_cases() {
        assert_eq!(macro_f1(&cm([[3, 0, 0], [0, 4, 0], [0, 0, 5]])), 1.0);
        // class 2 never predicted: F1 0 is part of the mean
        let m = macro_f1(&cm([[2, 0, 0], [0, 2, 0], [1, 1, 0]]));
        let f0 = 2.0 * (2.0 / 3.0) * 1.0 / (2.0 / 3.0 + 1.0);
        assert!((m - (2.0 * f0 + 0.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn table_lists_every_strategy() {
        let r = MetricReport::from_confusion(cm([[2, 0, 0], [0, 2, 0], [0, 1, 1]]), Some(0), EvalSet::TargetTest);
        let a = AggregateReport::new("supervised_t", vec![r.clone(), r], vec![]).unwrap();
        let t = report_table(&[a]);
        assert!(t.contains("supervised_t") && t.contains("TPR_FTD") && t.contains("83.33 ± 0.00"), "{t}");
    }
}
