//! Scenario evaluation: aggregation, metrics, ROC and fairness in one call.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::aggregation::{build_confusion, filter_scenario, AggregationError, LabeledPair, Predictions, ScenarioSpec};
use crate::cohort::Cohort;
use crate::fairness::{fairness_report, DiBounds, FairnessError, FairnessReport, PairGroupSpec};
use crate::metrics::{compute_metrics, roc_curve, ConfusionMatrix, MetricsError, MetricsReport, RocCurve};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvaluationError {
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("scenario {0} selects no evaluation units")]
    EmptyScenario(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
}

/// Metrics of one side of a group comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEvaluation {
    pub group: String,
    pub confusion: ConfusionMatrix,
    /// `None` when the group has no units.
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scenario: ScenarioSpec,
    pub pairs: Vec<LabeledPair>,
    pub metrics: MetricsReport,
    /// Present when every unit has a score and both classes occur.
    pub roc: Option<RocCurve>,
    pub groups: Vec<GroupEvaluation>,
    pub fairness: Option<FairnessReport>,
}

/// ROC over the units that carry a referral score.
pub fn pairs_roc(pairs: &[LabeledPair]) -> Option<RocCurve> {
    let (scores, truths): (Vec<f64>, Vec<bool>) = pairs
        .iter()
        .filter_map(|p| Some((p.score?, p.truth.code()? == 1)))
        .unzip();
    roc_curve(&scores, &truths).ok()
}

/// Evaluate `scenario`; with a comparison, the fairness row and per-group
/// metrics are computed on the scenario widened along the compared
/// attribute.
pub fn evaluate(
    cohort: &Cohort,
    predictions: &Predictions,
    scenario: &ScenarioSpec,
    comparison: Option<&PairGroupSpec>,
    bounds: &DiBounds,
) -> Result<Evaluation, EvaluationError> {
    let pairs = filter_scenario(cohort, predictions, scenario)?;
    if pairs.is_empty() {
        return Err(EvaluationError::EmptyScenario(scenario.to_string()));
    }
    let metrics = compute_metrics(&build_confusion(&pairs))?;
    let roc = pairs_roc(&pairs);

    let mut groups = Vec::new();
    let mut fairness = None;
    if let Some(cmp) = comparison {
        let wide = filter_scenario(cohort, predictions, &scenario.widened_for(&cmp.unprivileged))?;
        for g in [cmp.unprivileged, cmp.privileged] {
            let confusion = build_confusion(wide.iter().filter(|p| g.contains(p)));
            groups.push(GroupEvaluation {
                group: g.to_string(),
                confusion,
                metrics: compute_metrics(&confusion).ok(),
            });
        }
        fairness = Some(fairness_report(&wide, cmp, bounds)?.with_unit(scenario.unit));
    }

    Ok(Evaluation {
        scenario: *scenario,
        pairs,
        metrics,
        roc,
        groups,
        fairness,
    })
}
