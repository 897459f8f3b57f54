//! Confusion-matrix construction and multi-class IDS metrics: balanced
//! accuracy, precision, detection rate (recall), false alarm rate, F1.
//!
//! Per-class values come from a one-vs-rest reduction of the matrix.
//! Overall PREC and DR are macro averages of the per-class values, overall
//! F1 is the harmonic mean of those two, and the overall FAR is the fraction
//! of truly-negative (class 0, Normal) records flagged as any attack.
//! Empty denominators report 0 with an explicit marker, never NaN.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can::AttackClass;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("class value {value} out of range for {n_classes} classes")]
    ClassOutOfRange { value: usize, n_classes: usize },
    #[error("confusion matrix holds no records")]
    EmptyMatrix,
}

/// C x C counts, rows indexed by true class, columns by predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) -> Result<(), MetricsError> {
        if true_class >= self.n_classes {
            return Err(MetricsError::ClassOutOfRange {
                value: true_class,
                n_classes: self.n_classes,
            });
        }
        if predicted >= self.n_classes {
            return Err(MetricsError::ClassOutOfRange {
                value: predicted,
                n_classes: self.n_classes,
            });
        }
        self.counts[true_class * self.n_classes + predicted] += 1;
        Ok(())
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sum: how many records truly belong to `class`.
    pub fn instances(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.count(class, p)).sum()
    }

    /// One-vs-rest reduction for `class`: (TP, FP, FN, TN).
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.count(class, class);
        let fp: u64 = (0..self.n_classes)
            .filter(|&t| t != class)
            .map(|t| self.count(t, class))
            .sum();
        let fn_: u64 = (0..self.n_classes)
            .filter(|&p| p != class)
            .map(|p| self.count(class, p))
            .sum();
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }

    /// Adds another matrix of the same shape into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n_classes, other.n_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Counts prediction/label pairs into a confusion matrix.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, &t) in predictions.iter().zip(labels) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

/// One row of the per-class report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub instances: u64,
    pub precision: f64,
    pub detection_rate: f64,
    pub false_alarm_rate: f64,
    pub f1: f64,
    /// Set when the class had no instances, so DR is reported as 0 by
    /// convention rather than NaN.
    pub empty_class: bool,
}

/// Aggregate metrics plus the per-class table and the raw matrix, so any
/// other aggregation can be recomputed from the report alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total_instances: u64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub detection_rate: f64,
    pub false_alarm_rate: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Confusion counts, rows = true class, columns = predicted class.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

fn class_label(index: usize, n_classes: usize) -> String {
    if n_classes == AttackClass::COUNT {
        AttackClass::from_index(index)
            .map(|c| c.label().to_string())
            .unwrap_or_else(|| format!("class{index}"))
    } else {
        format!("class{index}")
    }
}

/// Computes the full report, treating class `negative_class` as the benign
/// class for the overall false alarm rate.
pub fn compute_metrics_with_negative(
    cm: &ConfusionMatrix,
    negative_class: usize,
) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let c = cm.n_classes();
    let mut per_class = Vec::with_capacity(c);
    let mut recall_sum = 0.0;
    let mut precision_sum = 0.0;
    for i in 0..c {
        let (tp, fp, fn_, tn) = cm.one_vs_rest(i);
        let instances = tp + fn_;
        let precision = ratio(tp, tp + fp);
        let dr = ratio(tp, tp + fn_);
        let far = ratio(fp, fp + tn);
        per_class.push(ClassMetrics {
            class: class_label(i, c),
            instances,
            precision,
            detection_rate: dr,
            false_alarm_rate: far,
            f1: harmonic(precision, dr),
            empty_class: instances == 0,
        });
        recall_sum += dr;
        precision_sum += precision;
    }
    let ba = recall_sum / c as f64;
    let precision = precision_sum / c as f64;
    let dr = ba;
    // Overall false alarms: benign records predicted as any attack.
    let negatives = cm.instances(negative_class);
    let false_alarms = negatives - cm.count(negative_class, negative_class);
    let confusion = (0..c)
        .map(|t| (0..c).map(|p| cm.count(t, p)).collect())
        .collect();
    Ok(MetricsReport {
        total_instances: total,
        balanced_accuracy: ba,
        precision,
        detection_rate: dr,
        false_alarm_rate: ratio(false_alarms, negatives),
        f1: harmonic(precision, dr),
        per_class,
        confusion,
    })
}

/// Computes the report with Normal fixed at class index 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    compute_metrics_with_negative(cm, 0)
}

/// Per-class rows of the report (the Tables IV-VI shape).
pub fn per_class_report(cm: &ConfusionMatrix) -> Result<Vec<ClassMetrics>, MetricsError> {
    Ok(compute_metrics(cm)?.per_class)
}

impl MetricsReport {
    /// Aligned text table mirroring the report column order.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "Class", "Instances", "PREC", "DR", "FAR", "F1"
        ));
        for row in &self.per_class {
            let marker = if row.empty_class { " (empty)" } else { "" };
            out.push_str(&format!(
                "{:<12} {:>10} {:>10.6} {:>10.6} {:>10.2e} {:>10.6}{}\n",
                row.class,
                row.instances,
                row.precision,
                row.detection_rate,
                row.false_alarm_rate,
                row.f1,
                marker
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>10} {:>10.6} {:>10.6} {:>10.2e} {:>10.6}  (BA {:.6})\n",
            "overall",
            self.total_instances,
            self.precision,
            self.detection_rate,
            self.false_alarm_rate,
            self.f1,
            self.balanced_accuracy
        ));
        out
    }
}
