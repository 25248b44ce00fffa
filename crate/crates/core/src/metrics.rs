//! Voxel confusion counts and the four overlap metrics: Dice similarity
//! coefficient, sensitivity, positive predictive value, and intersection
//! over union.
//!
//! Degenerate denominators follow one rule, applied per metric: 0/0 is
//! 1.0, because an empty prediction against an empty truth is perfect
//! agreement.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::volume::Mask;

/// Voxel tallies from comparing a predicted mask against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn pooled(reports: &[MetricsReport]) -> ConfusionCounts {
        let mut acc = ConfusionCounts::default();
        for r in reports {
            acc.tp += r.counts.tp;
            acc.fp += r.counts.fp;
            acc.fn_ += r.counts.fn_;
            acc.tn += r.counts.tn;
        }
        acc
    }
}

/// The four derived metrics, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub dsc: f64,
    pub sensitivity: f64,
    pub ppv: f64,
    pub iou: f64,
}

/// Per-volume evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub counts: ConfusionCounts,
    pub dsc: f64,
    pub sensitivity: f64,
    pub ppv: f64,
    pub iou: f64,
}

/// Macro-averaged metrics over a set of volumes; `micro` carries the
/// pooled-count variant when requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n: usize,
    pub mean: MetricValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro: Option<MetricValues>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    DimMismatch {
        lhs: (usize, usize, usize),
        rhs: (usize, usize, usize),
    },
    EmptyReportList,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DimMismatch { lhs, rhs } => {
                write!(f, "mask dims {lhs:?} vs {rhs:?}")
            }
            Self::EmptyReportList => write!(f, "cannot aggregate an empty report list"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// Voxelwise tally of prediction against truth.
pub fn confusion_counts(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts, MetricsError> {
    if pred.dims != gt.dims {
        return Err(MetricsError::DimMismatch {
            lhs: pred.dims,
            rhs: gt.dims,
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// dsc = 2tp/(2tp+fp+fn), sensitivity = tp/(tp+fn), ppv = tp/(tp+fp),
/// iou = tp/(tp+fp+fn).
pub fn metrics_from_counts(c: &ConfusionCounts) -> MetricValues {
    MetricValues {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        ppv: ratio(c.tp, c.tp + c.fp),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    }
}

pub fn report_volume(pred: &Mask, gt: &Mask, id: &str) -> Result<MetricsReport, MetricsError> {
    let counts = confusion_counts(pred, gt)?;
    let m = metrics_from_counts(&counts);
    Ok(MetricsReport {
        id: id.to_string(),
        counts,
        dsc: m.dsc,
        sensitivity: m.sensitivity,
        ppv: m.ppv,
        iou: m.iou,
    })
}

/// Unweighted per-volume mean of each metric (macro average). Pooled-count
/// micro averages are attached when `include_micro` is set.
pub fn aggregate(
    reports: &[MetricsReport],
    include_micro: bool,
) -> Result<AggregateReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyReportList);
    }
    let n = reports.len() as f64;
    let mean = MetricValues {
        dsc: reports.iter().map(|r| r.dsc).sum::<f64>() / n,
        sensitivity: reports.iter().map(|r| r.sensitivity).sum::<f64>() / n,
        ppv: reports.iter().map(|r| r.ppv).sum::<f64>() / n,
        iou: reports.iter().map(|r| r.iou).sum::<f64>() / n,
    };
    let micro = include_micro.then(|| metrics_from_counts(&ConfusionCounts::pooled(reports)));
    Ok(AggregateReport {
        n: reports.len(),
        mean,
        micro,
    })
}
