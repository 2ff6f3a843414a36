//! Confusion-matrix metrics, ROC curves and AUC.
//!
//! All rates are exact rationals. A metric whose denominator is zero is
//! `None` (undefined), never 0 or 1.

use alloc::vec::Vec;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Fraction = Ratio<u64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no scores given")]
    EmptyInput,
    #[error("ROC needs at least one positive and one negative")]
    DegenerateLabels,
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
}

/// Referable is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    /// Cells in the column order of the published tables: TN, FP, FN, TP.
    pub const fn from_cells(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    /// Same data with the class roles exchanged.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }

    pub fn record(&mut self, truth: bool, prediction: bool) {
        match (truth, prediction) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<Fraction> {
    (den != 0).then(|| Fraction::new(num, den))
}

/// Integer percent, rounded half up.
pub fn percent(r: Fraction) -> u32 {
    let (n, d) = (*r.numer() as u128, *r.denom() as u128);
    ((200 * n + d) / (2 * d)) as u32
}

pub fn to_f64(r: Fraction) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: Option<Fraction>,
    /// Precision.
    pub ppv: Option<Fraction>,
    pub npv: Option<Fraction>,
    /// Recall.
    pub sensitivity: Option<Fraction>,
    pub specificity: Option<Fraction>,
    /// F1 of the referable class (precision PPV, recall sensitivity).
    pub f1_positive: Option<Fraction>,
    /// F1 of the non-referable class (precision NPV, recall specificity).
    /// The headline F1 of the published comparison tables is this one.
    pub f1_negative: Option<Fraction>,
    pub f1_macro: Option<Fraction>,
}

/// Rounded integer percentages in the published reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Percentages {
    pub f1_negative: Option<u32>,
    pub sensitivity: Option<u32>,
    pub specificity: Option<u32>,
    pub ppv: Option<u32>,
    pub npv: Option<u32>,
    pub accuracy: Option<u32>,
}

impl Percentages {
    pub const fn new(f1_negative: u32, sensitivity: u32, specificity: u32, ppv: u32, npv: u32, accuracy: u32) -> Self {
        Percentages {
            f1_negative: Some(f1_negative),
            sensitivity: Some(sensitivity),
            specificity: Some(specificity),
            ppv: Some(ppv),
            npv: Some(npv),
            accuracy: Some(accuracy),
        }
    }

    pub fn fields(&self) -> [(&'static str, Option<u32>); 6] {
        [
            ("f1_negative", self.f1_negative),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("ppv", self.ppv),
            ("npv", self.npv),
            ("accuracy", self.accuracy),
        ]
    }
}

impl MetricsReport {
    pub fn percentages(&self) -> Percentages {
        Percentages {
            f1_negative: self.f1_negative.map(percent),
            sensitivity: self.sensitivity.map(percent),
            specificity: self.specificity.map(percent),
            ppv: self.ppv.map(percent),
            npv: self.npv.map(percent),
            accuracy: self.accuracy.map(percent),
        }
    }

    /// Every metric by name, for serialisation.
    pub fn named(&self) -> [(&'static str, Option<Fraction>); 8] {
        [
            ("accuracy", self.accuracy),
            ("ppv", self.ppv),
            ("npv", self.npv),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("f1_positive", self.f1_positive),
            ("f1_negative", self.f1_negative),
            ("f1_macro", self.f1_macro),
        ]
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let ConfusionMatrix { tp, tn, fp, fn_ } = *cm;
    if cm.total() == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    // 2PR / (P + R) reduces to 2TP / (2TP + FP + FN); it is defined exactly
    // when P and R are defined and not both zero, i.e. when TP > 0.
    let f1_positive = (tp > 0).then(|| Fraction::new(2 * tp, 2 * tp + fp + fn_));
    let f1_negative = (tn > 0).then(|| Fraction::new(2 * tn, 2 * tn + fn_ + fp));
    let f1_macro = match (f1_positive, f1_negative) {
        (Some(a), Some(b)) => Some((a + b) / 2),
        _ => None,
    };
    Ok(MetricsReport {
        confusion: *cm,
        accuracy: ratio(tp + tn, cm.total()),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        f1_positive,
        f1_negative,
        f1_macro,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Scores at or above this are called positive. The first point uses
    /// +infinity.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub tp: u64,
    pub fp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Descending threshold; starts at (0, 0), ends at (1, 1).
    pub points: Vec<RocPoint>,
    pub positives: u64,
    pub negatives: u64,
    pub auc: f64,
}

/// One point per distinct score, highest first, plus the (0, 0) origin.
pub fn roc_curve(scores: &[f64], truths: &[bool]) -> Result<RocCurve, MetricsError> {
    if scores.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: truths.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let positives = truths.iter().filter(|&&t| t).count() as u64;
    let negatives = truths.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateLabels);
    }

    let mut order: Vec<(f64, bool)> = scores.iter().copied().zip(truths.iter().copied()).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let point = |threshold, tp: u64, fp: u64| RocPoint {
        threshold,
        tpr: tp as f64 / positives as f64,
        fpr: fp as f64 / negatives as f64,
        tp,
        fp,
    };
    let mut points = Vec::with_capacity(order.len() + 1);
    points.push(point(f64::INFINITY, 0, 0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = order[i].0;
        while i < order.len() && order[i].0 == threshold {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(point(threshold, tp, fp));
    }

    let mut curve = RocCurve {
        points,
        positives,
        negatives,
        auc: 0.0,
    };
    curve.auc = auc(&curve);
    Ok(curve)
}

/// Trapezoidal area under the curve, accumulated in integer counts so the
/// only rounding is the final division.
pub fn auc(curve: &RocCurve) -> f64 {
    let twice_area: u128 = curve
        .points
        .windows(2)
        .map(|w| (w[1].fp - w[0].fp) as u128 * (w[1].tp + w[0].tp) as u128)
        .sum();
    twice_area as f64 / (2 * curve.positives as u128 * curve.negatives as u128) as f64
}
