//! Machine-readable (JSON, CSV) and aligned-text renderings of metrics,
//! fairness rows and evaluations. The JSON shapes are the stable contract.

use std::fmt::Write as _;
use std::io::Write;

use drscreen_core::evaluation::{Evaluation, GroupEvaluation};
use drscreen_core::fairness::{FairnessReport, FourFifths, GroupTally, SignedFraction};
use drscreen_core::metrics::{percent, to_f64, ConfusionMatrix, Fraction, MetricsReport, Percentages, RocCurve};
use drscreen_core::reference::{Mismatch, ReferenceRow};
use serde::{Deserialize, Serialize};

use crate::io::IoError;

/// An exact ratio with its decimal and rounded-percent forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub exact: String,
    pub value: f64,
    pub percent: u32,
}

impl From<Fraction> for Ratio {
    fn from(r: Fraction) -> Self {
        Ratio {
            exact: r.to_string(),
            value: to_f64(r),
            percent: percent(r),
        }
    }
}

/// A signed difference; EODs are reported to four decimals in the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signed {
    pub exact: String,
    pub value: f64,
}

impl From<SignedFraction> for Signed {
    fn from(r: SignedFraction) -> Self {
        Signed {
            exact: r.to_string(),
            value: *r.numer() as f64 / *r.denom() as f64,
        }
    }
}

/// Undefined metrics serialise as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub confusion: ConfusionMatrix,
    pub accuracy: Option<Ratio>,
    pub ppv: Option<Ratio>,
    pub npv: Option<Ratio>,
    pub sensitivity: Option<Ratio>,
    pub specificity: Option<Ratio>,
    pub f1_positive: Option<Ratio>,
    pub f1_negative: Option<Ratio>,
    pub f1_macro: Option<Ratio>,
    pub percentages: Percentages,
}

impl From<&MetricsReport> for MetricsJson {
    fn from(m: &MetricsReport) -> Self {
        let r = |x: Option<Fraction>| x.map(Ratio::from);
        MetricsJson {
            confusion: m.confusion,
            accuracy: r(m.accuracy),
            ppv: r(m.ppv),
            npv: r(m.npv),
            sensitivity: r(m.sensitivity),
            specificity: r(m.specificity),
            f1_positive: r(m.f1_positive),
            f1_negative: r(m.f1_negative),
            f1_macro: r(m.f1_macro),
            percentages: m.percentages(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPointJson {
    /// `null` for the origin point, whose threshold is +infinity.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocJson {
    pub auc: f64,
    pub positives: u64,
    pub negatives: u64,
    pub points: Vec<RocPointJson>,
}

impl From<&RocCurve> for RocJson {
    fn from(c: &RocCurve) -> Self {
        RocJson {
            auc: c.auc,
            positives: c.positives,
            negatives: c.negatives,
            points: c
                .points
                .iter()
                .map(|p| RocPointJson {
                    threshold: p.threshold.is_finite().then_some(p.threshold),
                    fpr: p.fpr,
                    tpr: p.tpr,
                })
                .collect(),
        }
    }
}

/// One fairness row, in the published column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessRow {
    pub feature: String,
    #[serde(rename = "type")]
    pub unit: Option<String>,
    pub unprivileged: String,
    pub privileged: String,
    pub di: Option<Ratio>,
    pub eod_0: Option<Signed>,
    pub eod_1: Option<Signed>,
    pub four_fifths: FourFifths,
    pub overlapping: bool,
    pub unprivileged_counts: GroupTally,
    pub privileged_counts: GroupTally,
}

impl From<&FairnessReport> for FairnessRow {
    fn from(f: &FairnessReport) -> Self {
        FairnessRow {
            feature: f.feature.to_string(),
            unit: f.unit.map(|u| u.label().to_string()),
            unprivileged: f.unprivileged.clone(),
            privileged: f.privileged.clone(),
            di: f.di.map(Ratio::from),
            eod_0: f.eod_0.map(Signed::from),
            eod_1: f.eod_1.map(Signed::from),
            four_fifths: f.four_fifths,
            overlapping: f.overlapping,
            unprivileged_counts: f.unprivileged_counts,
            privileged_counts: f.privileged_counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupJson {
    pub group: String,
    pub confusion: ConfusionMatrix,
    pub metrics: Option<MetricsJson>,
}

impl From<&GroupEvaluation> for GroupJson {
    fn from(g: &GroupEvaluation) -> Self {
        GroupJson {
            group: g.group.clone(),
            confusion: g.confusion,
            metrics: g.metrics.as_ref().map(MetricsJson::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationJson {
    pub scenario: String,
    pub units: usize,
    pub metrics: MetricsJson,
    pub roc: Option<RocJson>,
    pub groups: Vec<GroupJson>,
    pub fairness: Option<FairnessRow>,
}

impl From<&Evaluation> for EvaluationJson {
    fn from(e: &Evaluation) -> Self {
        EvaluationJson {
            scenario: e.scenario.to_string(),
            units: e.pairs.len(),
            metrics: MetricsJson::from(&e.metrics),
            roc: e.roc.as_ref().map(RocJson::from),
            groups: e.groups.iter().map(GroupJson::from).collect(),
            fairness: e.fairness.as_ref().map(FairnessRow::from),
        }
    }
}

/// Outcome of checking one published row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproducedRow {
    pub label: String,
    pub matrix: ConfusionMatrix,
    pub expected: Percentages,
    pub actual: Percentages,
    pub mismatches: Vec<Mismatch>,
}

impl ReproducedRow {
    /// An empty matrix has no defined metric and mismatches every cell.
    pub fn check(row: &ReferenceRow) -> Self {
        let actual = row.actual().unwrap_or(Percentages {
            f1_negative: None,
            sensitivity: None,
            specificity: None,
            ppv: None,
            npv: None,
            accuracy: None,
        });
        let mismatches = row
            .expected
            .fields()
            .into_iter()
            .zip(actual.fields())
            .filter(|((_, e), (_, a))| e != a)
            .map(|((name, expected), (_, actual))| Mismatch {
                metric: name.to_string(),
                expected,
                actual,
            })
            .collect();
        ReproducedRow {
            label: row.label(),
            matrix: row.matrix,
            expected: row.expected,
            actual,
            mismatches,
        }
    }
}

fn cell(v: Option<u32>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// `F1; (Sens, Spec, PPV, NPV, Acc)`, undefined cells shown as `-`.
pub fn percent_line(p: &Percentages) -> String {
    format!(
        "{}; ({}, {}, {}, {}, {})",
        cell(p.f1_negative),
        cell(p.sensitivity),
        cell(p.specificity),
        cell(p.ppv),
        cell(p.npv),
        cell(p.accuracy)
    )
}

pub fn matrix_line(m: &ConfusionMatrix) -> String {
    format!("TN={} FP={} FN={} TP={}", m.tn, m.fp, m.fn_, m.tp)
}

/// Aligned text table of reproduced rows, one line per row plus a diff
/// line for each mismatching cell.
pub fn reproduce_table(rows: &[ReproducedRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in rows {
        let status = if r.mismatches.is_empty() { "ok" } else { "MISMATCH" };
        let _ = writeln!(
            out,
            "{:<width$}  {:<32}  {}  {}",
            r.label,
            matrix_line(&r.matrix),
            percent_line(&r.actual),
            status
        );
        for m in &r.mismatches {
            let _ = writeln!(
                out,
                "  {}: expected {}, got {}",
                m.metric,
                cell(m.expected),
                cell(m.actual)
            );
        }
    }
    out
}

/// Human-readable summary of an evaluation.
pub fn evaluation_text(e: &EvaluationJson) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario  {}", e.scenario);
    let _ = writeln!(out, "units     {}", e.units);
    let _ = writeln!(out, "matrix    {}", matrix_line(&e.metrics.confusion));
    let _ = writeln!(out, "metrics   {}", percent_line(&e.metrics.percentages));
    if let Some(roc) = &e.roc {
        let _ = writeln!(out, "auc       {:.4}", roc.auc);
    }
    for g in &e.groups {
        let line = g.metrics.as_ref().map_or("no units".to_string(), |m| percent_line(&m.percentages));
        let _ = writeln!(out, "group     {:<8} {}  {}", g.group, matrix_line(&g.confusion), line);
    }
    if let Some(f) = &e.fairness {
        out.push_str(&fairness_text(std::slice::from_ref(f)));
    }
    out
}

const FAIRNESS_COLUMNS: [&str; 9] = [
    "Feature",
    "Type",
    "unprivileged",
    "privileged",
    "DI",
    "EOD_0",
    "EOD_1",
    "four_fifths",
    "overlapping",
];

fn four(v: f64) -> String {
    format!("{v:.4}")
}

fn fairness_cells(f: &FairnessRow) -> [String; 9] {
    [
        f.feature.clone(),
        f.unit.clone().unwrap_or_default(),
        f.unprivileged.clone(),
        f.privileged.clone(),
        f.di.as_ref().map_or(String::new(), |d| four(d.value)),
        f.eod_0.as_ref().map_or(String::new(), |d| four(d.value)),
        f.eod_1.as_ref().map_or(String::new(), |d| four(d.value)),
        serde_json::to_value(f.four_fifths)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        f.overlapping.to_string(),
    ]
}

/// CSV with the published fairness columns; undefined values are empty.
pub fn write_fairness_csv<W: Write>(writer: W, rows: &[FairnessRow]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FAIRNESS_COLUMNS)?;
    for r in rows {
        w.write_record(fairness_cells(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn fairness_text(rows: &[FairnessRow]) -> String {
    let table: Vec<[String; 9]> = rows.iter().map(fairness_cells).collect();
    let mut widths = FAIRNESS_COLUMNS.map(str::len);
    for r in &table {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(FAIRNESS_COLUMNS.to_vec());
    for r in &table {
        line(r.iter().map(|s| s.as_str()).collect());
    }
    out
}
