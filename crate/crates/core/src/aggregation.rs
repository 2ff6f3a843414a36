//! From per-image grades and dispositions to labelled evaluation units.
//!
//! A unit is either one image or one patient. Patient labels combine the
//! patient's images that pass the scenario filters: referable if any image
//! is, otherwise non-referable if any image is, otherwise excluded.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, ImageRecord};
use crate::error::ParseError;
use crate::fairness::{PairGroup, PairGroupSpec};
use crate::grade::{referral_category, Disposition, Laterality, Projection, ReferralCategory, ReferralScheme, Sex};
use crate::inference::InferenceBackend;
use crate::metrics::ConfusionMatrix;
use crate::workflow::{run_screening, MdProvider, ScreeningInput, ScreeningPolicy, ScreeningResult, WorkflowError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregationError {
    #[error("no images to aggregate")]
    EmptyInput,
    #[error("no prediction for image {0:?}")]
    MissingPrediction(String),
    #[error("image {0:?} is still waiting for a retake")]
    PendingRetake(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalUnit {
    PerImage,
    PerPatient,
}

impl EvalUnit {
    /// Label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            EvalUnit::PerImage => "Per Image",
            EvalUnit::PerPatient => "Per Patient",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalUnit::PerImage => "image",
            EvalUnit::PerPatient => "patient",
        }
    }
}

impl fmt::Display for EvalUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalUnit {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "image" | "per_image" => Ok(EvalUnit::PerImage),
            "patient" | "per_patient" => Ok(EvalUnit::PerPatient),
            _ => Err(ParseError::new("evaluation unit", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionFilter {
    A,
    B,
    #[serde(rename = "AB")]
    Both,
}

impl ProjectionFilter {
    pub fn matches(self, p: Projection) -> bool {
        match self {
            ProjectionFilter::A => p == Projection::A,
            ProjectionFilter::B => p == Projection::B,
            ProjectionFilter::Both => true,
        }
    }

    fn single(self) -> Option<Projection> {
        match self {
            ProjectionFilter::A => Some(Projection::A),
            ProjectionFilter::B => Some(Projection::B),
            ProjectionFilter::Both => None,
        }
    }
}

impl fmt::Display for ProjectionFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionFilter::A => "A",
            ProjectionFilter::B => "B",
            ProjectionFilter::Both => "AB",
        })
    }
}

impl FromStr for ProjectionFilter {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(ProjectionFilter::A),
            "B" => Ok(ProjectionFilter::B),
            "AB" | "BOTH" | "ALL" => Ok(ProjectionFilter::Both),
            _ => Err(ParseError::new("projection filter", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeCmp {
    Lt,
    Le,
    Ge,
    Gt,
}

/// Age band such as `<60` or `>=60`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgeFilter {
    pub cmp: AgeCmp,
    pub threshold: u16,
}

impl AgeFilter {
    pub const fn new(cmp: AgeCmp, threshold: u16) -> Self {
        AgeFilter { cmp, threshold }
    }

    pub fn matches(self, age: u16) -> bool {
        match self.cmp {
            AgeCmp::Lt => age < self.threshold,
            AgeCmp::Le => age <= self.threshold,
            AgeCmp::Ge => age >= self.threshold,
            AgeCmp::Gt => age > self.threshold,
        }
    }
}

impl fmt::Display for AgeFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.cmp {
            AgeCmp::Lt => "<",
            AgeCmp::Le => "<=",
            AgeCmp::Ge => ">=",
            AgeCmp::Gt => ">",
        };
        write!(f, "{op}{}", self.threshold)
    }
}

impl FromStr for AgeFilter {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let (cmp, rest) = [
            ("<=", AgeCmp::Le),
            ("≤", AgeCmp::Le),
            (">=", AgeCmp::Ge),
            ("≥", AgeCmp::Ge),
            ("<", AgeCmp::Lt),
            (">", AgeCmp::Gt),
        ]
        .into_iter()
        .find_map(|(op, cmp)| t.strip_prefix(op).map(|rest| (cmp, rest)))
        .ok_or_else(|| ParseError::new("age filter", s))?;
        let threshold = rest.trim().parse().map_err(|_| ParseError::new("age filter", s))?;
        Ok(AgeFilter { cmp, threshold })
    }
}

/// Which units an evaluation looks at. An unset filter keeps everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scheme: ReferralScheme,
    pub unit: EvalUnit,
    pub projection: ProjectionFilter,
    #[serde(default)]
    pub sex: Option<Sex>,
    #[serde(default)]
    pub laterality: Option<Laterality>,
    #[serde(default)]
    pub age: Option<AgeFilter>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            scheme: ReferralScheme::Rdr,
            unit: EvalUnit::PerPatient,
            projection: ProjectionFilter::A,
            sex: None,
            laterality: None,
            age: None,
        }
    }
}

impl ScenarioSpec {
    pub fn with_scheme(mut self, scheme: ReferralScheme) -> Self {
        self.scheme = scheme;
        self
    }

    fn admits_patient(&self, sex: Sex, age: u16) -> bool {
        self.sex.is_none_or(|s| s == sex) && self.age.is_none_or(|a| a.matches(age))
    }

    fn admits_image(&self, img: &ImageRecord) -> bool {
        self.projection.matches(img.projection) && self.laterality.is_none_or(|l| l == img.laterality)
    }

    /// The same scenario with the filter on `group`'s attribute removed, so
    /// both sides of a comparison are visible.
    pub fn widened_for(&self, group: &PairGroup) -> Self {
        let mut s = *self;
        match group {
            PairGroup::Sex(_) => s.sex = None,
            PairGroup::Age(_) => s.age = None,
            PairGroup::Projection(_) => s.projection = ProjectionFilter::Both,
            PairGroup::Laterality(_) => s.laterality = None,
        }
        s
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "scheme={},unit={},proj={}", self.scheme, self.unit, self.projection)?;
        if let Some(s) = self.sex {
            write!(f, ",sex={s}")?;
        }
        if let Some(l) = self.laterality {
            write!(f, ",lat={l}")?;
        }
        if let Some(a) = self.age {
            write!(f, ",age={a}")?;
        }
        Ok(())
    }
}

impl FromStr for ScenarioSpec {
    type Err = ParseError;

    /// `scheme=RDR,unit=patient,proj=A,sex=F,lat=L,age=<60`; omitted keys
    /// take the defaults (RDR, patient, A, no filters).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut spec = ScenarioSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| ParseError::new("scenario", part))?;
            let value = value.trim();
            let all = value.eq_ignore_ascii_case("all") || value.eq_ignore_ascii_case("both");
            match key.trim().to_ascii_lowercase().as_str() {
                "scheme" | "data" => spec.scheme = value.parse()?,
                "unit" | "type" => spec.unit = value.parse()?,
                "proj" | "projection" => spec.projection = value.parse()?,
                "sex" => spec.sex = if all { None } else { Some(value.parse()?) },
                "lat" | "laterality" => spec.laterality = if all { None } else { Some(value.parse()?) },
                "age" => spec.age = if all { None } else { Some(value.parse()?) },
                _ => return Err(ParseError::new("scenario key", key)),
            }
        }
        Ok(spec)
    }
}

/// One evaluation unit with its labels and the attributes used for slicing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub unit_id: String,
    pub truth: ReferralCategory,
    pub prediction: ReferralCategory,
    pub sex: Sex,
    pub age: u16,
    /// Per-image units always carry it; patient units only when the scenario
    /// used a single projection.
    #[serde(default)]
    pub projection: Option<Projection>,
    /// Per-image units only.
    #[serde(default)]
    pub laterality: Option<Laterality>,
    /// Referral-model score (maximum over the unit's images).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// What the system said about one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub disposition: Disposition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referral_score: Option<f64>,
}

impl From<&ScreeningResult> for ImagePrediction {
    fn from(r: &ScreeningResult) -> Self {
        ImagePrediction {
            disposition: r.disposition,
            referral_score: r.referral_score(),
        }
    }
}

/// Predictions keyed by image id.
pub type Predictions = BTreeMap<String, ImagePrediction>;

fn combine(categories: impl IntoIterator<Item = ReferralCategory>) -> ReferralCategory {
    let mut out = ReferralCategory::Excluded;
    for c in categories {
        match c {
            ReferralCategory::Referable => return c,
            ReferralCategory::NonReferable => out = c,
            ReferralCategory::Excluded => {}
        }
    }
    out
}

/// Patient truth from the consensus grades of the patient's images.
/// Enucleated (R5) eyes carry no label and are ignored.
pub fn patient_truth(images: &[&ImageRecord], scheme: ReferralScheme) -> Result<ReferralCategory, AggregationError> {
    if images.is_empty() {
        return Err(AggregationError::EmptyInput);
    }
    Ok(combine(images.iter().filter_map(|i| referral_category(i.consensus, scheme).ok())))
}

/// Patient prediction from the dispositions of the patient's images.
pub fn patient_prediction(dispositions: &[Disposition], scheme: ReferralScheme) -> Result<ReferralCategory, AggregationError> {
    if dispositions.is_empty() {
        return Err(AggregationError::EmptyInput);
    }
    let mut cats = Vec::with_capacity(dispositions.len());
    for d in dispositions {
        cats.push(d.referral(scheme).ok_or_else(|| AggregationError::PendingRetake(String::new()))?);
    }
    Ok(combine(cats))
}

fn lookup<'a>(predictions: &'a Predictions, image_id: &str) -> Result<&'a ImagePrediction, AggregationError> {
    let p = predictions
        .get(image_id)
        .ok_or_else(|| AggregationError::MissingPrediction(image_id.to_string()))?;
    if p.disposition == Disposition::Retake {
        return Err(AggregationError::PendingRetake(image_id.to_string()));
    }
    Ok(p)
}

fn max_score(scores: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    scores.into_iter().flatten().reduce(f64::max)
}

/// Labelled units of `scenario`. Units whose truth or prediction is
/// excluded are dropped.
pub fn filter_scenario(cohort: &Cohort, predictions: &Predictions, scenario: &ScenarioSpec) -> Result<Vec<LabeledPair>, AggregationError> {
    let scheme = scenario.scheme;
    let mut pairs = Vec::new();
    for (patient, images) in cohort.images_by_patient() {
        if !scenario.admits_patient(patient.sex, patient.age) {
            continue;
        }
        // Enucleated eyes have no label under either scheme.
        let images: Vec<&ImageRecord> = images
            .into_iter()
            .filter(|i| scenario.admits_image(i) && referral_category(i.consensus, scheme).is_ok())
            .collect();
        if images.is_empty() {
            continue;
        }
        match scenario.unit {
            EvalUnit::PerImage => {
                for img in images {
                    let pred = lookup(predictions, &img.image_id)?;
                    let truth = combine([referral_category(img.consensus, scheme).expect("filtered above")]);
                    let prediction = combine(pred.disposition.referral(scheme));
                    if truth == ReferralCategory::Excluded || prediction == ReferralCategory::Excluded {
                        continue;
                    }
                    pairs.push(LabeledPair {
                        unit_id: img.image_id.clone(),
                        truth,
                        prediction,
                        sex: patient.sex,
                        age: patient.age,
                        projection: Some(img.projection),
                        laterality: Some(img.laterality),
                        score: pred.referral_score,
                    });
                }
            }
            EvalUnit::PerPatient => {
                let preds = images
                    .iter()
                    .map(|i| lookup(predictions, &i.image_id))
                    .collect::<Result<Vec<_>, _>>()?;
                let truth = patient_truth(&images, scheme)?;
                let dispositions: Vec<Disposition> = preds.iter().map(|p| p.disposition).collect();
                let prediction = patient_prediction(&dispositions, scheme)?;
                if truth == ReferralCategory::Excluded || prediction == ReferralCategory::Excluded {
                    continue;
                }
                pairs.push(LabeledPair {
                    unit_id: patient.patient_id.clone(),
                    truth,
                    prediction,
                    sex: patient.sex,
                    age: patient.age,
                    projection: scenario.projection.single(),
                    laterality: scenario.laterality,
                    score: max_score(preds.iter().map(|p| p.referral_score)),
                });
            }
        }
    }
    Ok(pairs)
}

/// Referable is the positive class. Pairs with an excluded label are
/// skipped.
pub fn build_confusion<'a>(pairs: impl IntoIterator<Item = &'a LabeledPair>) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for p in pairs {
        if let (Some(t), Some(r)) = (p.truth.code(), p.prediction.code()) {
            cm.record(t == 1, r == 1);
        }
    }
    cm
}

/// A row of the experiment table: a scenario plus an optional group
/// comparison for the fairness rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Experiment {
    pub number: u8,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub comparison: Option<PairGroupSpec>,
}

impl Experiment {
    pub const NUMBERS: core::ops::RangeInclusive<u8> = 1..=9;

    /// The nine published setups. The age band of experiment 9 is `<60`,
    /// matching the fairness table's `<60` / `>=60` split.
    pub fn table7(number: u8) -> Option<Experiment> {
        use crate::aggregation::EvalUnit::{PerImage, PerPatient};
        use crate::aggregation::ProjectionFilter::{Both, A, B};
        use crate::grade::ReferralScheme::{Acr, Rdr};

        let scenario = |scheme, unit, projection| ScenarioSpec {
            scheme,
            unit,
            projection,
            ..ScenarioSpec::default()
        };
        let cmp = |u, p| Some(PairGroupSpec::new(u, p).expect("distinct built-in groups"));
        let young = AgeFilter::new(AgeCmp::Lt, 60);
        let (scenario, comparison) = match number {
            1 => (scenario(Rdr, PerPatient, A), None),
            2 => (scenario(Acr, PerPatient, A), None),
            3 => (scenario(Rdr, PerImage, A), None),
            4 => (scenario(Acr, PerImage, A), None),
            5 => (
                scenario(Rdr, PerImage, Both),
                cmp(PairGroup::Projection(B), PairGroup::Projection(A)),
            ),
            6 => (
                scenario(Rdr, PerImage, Both),
                cmp(PairGroup::Projection(A), PairGroup::Projection(Both)),
            ),
            7 => (
                scenario(Rdr, PerPatient, A),
                cmp(PairGroup::Sex(Sex::Male), PairGroup::Sex(Sex::Female)),
            ),
            8 => (
                scenario(Rdr, PerImage, A),
                cmp(
                    PairGroup::Laterality(Laterality::Left),
                    PairGroup::Laterality(Laterality::Right),
                ),
            ),
            9 => (
                ScenarioSpec {
                    age: Some(young),
                    ..scenario(Rdr, PerPatient, A)
                },
                cmp(
                    PairGroup::Age(young),
                    PairGroup::Age(AgeFilter::new(AgeCmp::Ge, 60)),
                ),
            ),
            _ => return None,
        };
        Some(Experiment {
            number,
            scenario,
            comparison,
        })
    }

    pub fn all() -> Vec<Experiment> {
        Self::NUMBERS.filter_map(Experiment::table7).collect()
    }
}

impl FromStr for Experiment {
    type Err = ParseError;

    /// `experiment-5`, `exp5` or `5`, optionally suffixed `:ACR` to switch
    /// the scheme.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseError::new("experiment", s);
        let (name, scheme) = match s.trim().split_once(':') {
            Some((n, sch)) => (n, Some(sch.parse::<ReferralScheme>()?)),
            None => (s.trim(), None),
        };
        let lower = name.to_ascii_lowercase();
        let digits = lower
            .strip_prefix("experiment")
            .or_else(|| lower.strip_prefix("exp"))
            .unwrap_or(&lower)
            .trim_start_matches(['-', '_', ' ']);
        let n: u8 = digits.parse().map_err(|_| err())?;
        let mut e = Experiment::table7(n).ok_or_else(err)?;
        if let Some(scheme) = scheme {
            e.scenario.scheme = scheme;
        }
        Ok(e)
    }
}

/// Screen every cohort image through `backend`, following retake requests
/// until each image reaches a terminal disposition.
pub fn screen_cohort<B, M>(
    cohort: &Cohort,
    backend: &B,
    policy: &ScreeningPolicy,
    md: &mut M,
) -> Result<(Predictions, Vec<ScreeningResult>), WorkflowError>
where
    B: InferenceBackend + ?Sized,
    M: MdProvider + ?Sized,
{
    let mut predictions = Predictions::new();
    let mut results = Vec::with_capacity(cohort.images().len());
    for img in cohort.images() {
        let mut attempt = 0;
        let result = loop {
            let input = ScreeningInput {
                image_id: &img.image_id,
                image: None,
                attempt,
            };
            let r = run_screening(input, backend, policy, md)?;
            if r.disposition != Disposition::Retake {
                break r;
            }
            attempt += 1;
        };
        predictions.insert(img.image_id.clone(), ImagePrediction::from(&result));
        results.push(result);
    }
    Ok((predictions, results))
}

/// Predictions that repeat the truth: referable grades are sent to the
/// specialist, ungradable ones are referred as ungradable, the rest are
/// reviewed. R5 images get no prediction.
pub fn oracle_predictions(cohort: &Cohort) -> Predictions {
    use crate::grade::Grade;
    cohort
        .images()
        .iter()
        .filter_map(|img| {
            let disposition = match img.consensus {
                Grade::R0 | Grade::R1 => Disposition::Review12Months,
                Grade::R2 => Disposition::Review6Months,
                Grade::R3 | Grade::R4 => Disposition::ReferSpecialist,
                Grade::R6 => Disposition::ReferUngradable,
                Grade::R5 => return None,
            };
            let score = if disposition == Disposition::ReferSpecialist { 1.0 } else { 0.0 };
            Some((
                img.image_id.clone(),
                ImagePrediction {
                    disposition,
                    referral_score: Some(score),
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic, PatientRecord, SyntheticParams};
    use crate::grade::Grade;
    use alloc::format;
    use alloc::vec;

    fn img(id: &str, pid: &str, lat: Laterality, proj: Projection, g: Grade) -> ImageRecord {
        ImageRecord::new(id, pid, lat, proj, [g; 3], None)
    }

    fn truth_of(grades: &[Grade], scheme: ReferralScheme) -> ReferralCategory {
        let images: Vec<ImageRecord> = grades
            .iter()
            .enumerate()
            .map(|(i, &g)| img(&format!("i{i}"), "p", Laterality::Left, Projection::A, g))
            .collect();
        let refs: Vec<&ImageRecord> = images.iter().collect();
        patient_truth(&refs, scheme).unwrap()
    }

    #[test]
    fn patient_truth_examples() {
        use Grade::*;
        use ReferralCategory::*;
        assert_eq!(truth_of(&[R3, R0], ReferralScheme::Rdr), Referable);
        assert_eq!(truth_of(&[R6, R6], ReferralScheme::Acr), Referable);
        assert_eq!(truth_of(&[R6, R6], ReferralScheme::Rdr), Excluded);
        assert_eq!(truth_of(&[R2, R6], ReferralScheme::Rdr), NonReferable);
        assert_eq!(truth_of(&[R5], ReferralScheme::Rdr), Excluded);
        assert_eq!(patient_truth(&[], ReferralScheme::Rdr), Err(AggregationError::EmptyInput));
    }

    #[test]
    fn patient_truth_matches_enumeration() {
        use Grade::*;
        let gradable = [R0, R1, R2, R3, R4, R6];
        for scheme in [ReferralScheme::Rdr, ReferralScheme::Acr] {
            for a in gradable {
                for b in gradable {
                    for c in gradable {
                        let set = [a, b, c];
                        let referable = set.iter().any(|g| match scheme {
                            ReferralScheme::Rdr => matches!(g, R3 | R4),
                            ReferralScheme::Acr => matches!(g, R3 | R4 | R6),
                        });
                        let all_ungradable = set.iter().all(|g| *g == R6);
                        let expected = if referable {
                            ReferralCategory::Referable
                        } else if all_ungradable {
                            ReferralCategory::Excluded
                        } else {
                            ReferralCategory::NonReferable
                        };
                        assert_eq!(truth_of(&set, scheme), expected, "{set:?} {scheme}");
                    }
                }
            }
        }
    }

    #[test]
    fn patient_prediction_examples() {
        use Disposition::*;
        use ReferralCategory::*;
        let rdr = ReferralScheme::Rdr;
        assert_eq!(patient_prediction(&[ReferSpecialist, Review12Months], rdr), Ok(Referable));
        assert_eq!(patient_prediction(&[ReferUngradable, ReferUngradable], ReferralScheme::Acr), Ok(Referable));
        assert_eq!(patient_prediction(&[ReferUngradable], rdr), Ok(Excluded));
        assert_eq!(patient_prediction(&[Review12Months, Review12Months], rdr), Ok(NonReferable));
        assert_eq!(patient_prediction(&[], rdr), Err(AggregationError::EmptyInput));
        assert!(patient_prediction(&[Retake], rdr).is_err());
    }

    fn small_cohort() -> Cohort {
        let patients = vec![
            PatientRecord { patient_id: "P1".into(), age: 50, sex: Sex::Female },
            PatientRecord { patient_id: "P2".into(), age: 70, sex: Sex::Male },
            PatientRecord { patient_id: "P3".into(), age: 65, sex: Sex::Male },
        ];
        let images = vec![
            img("P1-LA", "P1", Laterality::Left, Projection::A, Grade::R0),
            img("P1-LB", "P1", Laterality::Left, Projection::B, Grade::R3),
            img("P2-LA", "P2", Laterality::Left, Projection::A, Grade::R4),
            img("P2-RA", "P2", Laterality::Right, Projection::A, Grade::R6),
            img("P3-LA", "P3", Laterality::Left, Projection::A, Grade::R6),
        ];
        Cohort::new(patients, images, "test").unwrap()
    }

    #[test]
    fn scenario_filters_and_exclusion() {
        let c = small_cohort();
        let preds = oracle_predictions(&c);
        let exp1 = Experiment::table7(1).unwrap().scenario;
        let pairs = filter_scenario(&c, &preds, &exp1).unwrap();
        // P3 is ungradable only; P1 contributes only its A image.
        let ids: Vec<&str> = pairs.iter().map(|p| p.unit_id.as_str()).collect();
        assert_eq!(ids, ["P1", "P2"]);
        assert_eq!(pairs[0].truth, ReferralCategory::NonReferable);
        assert_eq!(pairs[1].truth, ReferralCategory::Referable);

        let acr = exp1.with_scheme(ReferralScheme::Acr);
        assert_eq!(filter_scenario(&c, &preds, &acr).unwrap().len(), 3);

        let per_image_b: ScenarioSpec = "unit=image,proj=B".parse().unwrap();
        let pairs = filter_scenario(&c, &preds, &per_image_b).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].laterality, Some(Laterality::Left));

        let young = Experiment::table7(9).unwrap().scenario;
        let pairs = filter_scenario(&c, &preds, &young).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(pairs.iter().all(|p| p.age < 60));

        assert!(filter_scenario(&Cohort::empty(), &Predictions::new(), &exp1).unwrap().is_empty());
    }

    #[test]
    fn missing_prediction_is_reported() {
        let c = small_cohort();
        let mut preds = oracle_predictions(&c);
        preds.remove("P2-LA");
        let err = filter_scenario(&c, &preds, &ScenarioSpec::default()).unwrap_err();
        assert_eq!(err, AggregationError::MissingPrediction("P2-LA".into()));
    }

    #[test]
    fn confusion_from_pairs() {
        assert_eq!(build_confusion(&[]), ConfusionMatrix::default());
        let c = small_cohort();
        let preds = oracle_predictions(&c);
        let pairs = filter_scenario(&c, &preds, &"unit=image,proj=AB,scheme=ACR".parse().unwrap()).unwrap();
        let cm = build_confusion(&pairs);
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        assert_eq!(cm.tp, 4);
        assert_eq!(cm.tn, 1);
    }

    #[test]
    fn synthetic_oracle_counts() {
        let c = generate_synthetic(&SyntheticParams::table3(), 11).unwrap();
        let preds = oracle_predictions(&c);
        let count = |scheme| {
            let s = ScenarioSpec::default().with_scheme(scheme);
            build_confusion(&filter_scenario(&c, &preds, &s).unwrap())
        };
        let acr = count(ReferralScheme::Acr);
        let rdr = count(ReferralScheme::Rdr);
        assert_eq!((acr.positives(), acr.negatives()), (303, 743));
        assert_eq!((rdr.positives(), rdr.negatives()), (54, 743));
    }

    #[test]
    fn scenario_round_trip() {
        for e in Experiment::all() {
            let text = e.scenario.to_string();
            assert_eq!(text.parse::<ScenarioSpec>().unwrap(), e.scenario, "{text}");
        }
        let s: ScenarioSpec = "scheme=acr,unit=per-image,proj=both,sex=F,lat=R,age=≤60".parse().unwrap();
        assert_eq!(s.age, Some(AgeFilter::new(AgeCmp::Le, 60)));
        assert_eq!(s.laterality, Some(Laterality::Right));
        assert!("unit=eye".parse::<ScenarioSpec>().is_err());
        assert!("colour=red".parse::<ScenarioSpec>().is_err());
    }

    #[test]
    fn experiment_names() {
        assert_eq!("experiment-5".parse::<Experiment>().unwrap().number, 5);
        assert_eq!("exp9".parse::<Experiment>().unwrap().scenario.age.unwrap().threshold, 60);
        let e: Experiment = "5:ACR".parse().unwrap();
        assert_eq!(e.scenario.scheme, ReferralScheme::Acr);
        assert!("experiment-10".parse::<Experiment>().is_err());
        assert_eq!(Experiment::all().len(), 9);
    }
}
