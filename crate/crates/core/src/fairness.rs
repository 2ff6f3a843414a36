//! Disparate impact and equal-opportunity differences between two groups.
//!
//! For outcome `R`, truth `Y` and group `A`:
//!
//! ```text
//! DI    = P(R=1 | A=unpriv) / P(R=1 | A=priv)
//! EOD_1 = P(R=1 | Y=1, A=unpriv) - P(R=1 | Y=1, A=priv)
//! EOD_0 = P(R=0 | Y=0, A=unpriv) - P(R=0 | Y=0, A=priv)
//! ```
//!
//! Everything is computed in exact rationals from integer counts.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AgeFilter, EvalUnit, LabeledPair, ProjectionFilter};
use crate::grade::{Laterality, Sex};
use crate::metrics::Fraction;

pub type SignedFraction = Ratio<i64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FairnessError {
    #[error("{0} group has no records")]
    EmptyGroup(&'static str),
    #[error("unprivileged and privileged groups are identical")]
    IdenticalGroups,
    #[error("invalid group selector: {0}")]
    InvalidSelector(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord<A> {
    /// R: the model called the unit positive.
    pub outcome: bool,
    /// Y: the unit is truly positive.
    pub truth: bool,
    /// A: group attribute value.
    pub group: A,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec<A> {
    pub attribute: String,
    /// Monitored group.
    pub unprivileged: A,
    /// Reference group.
    pub privileged: A,
}

impl<A: PartialEq> GroupSpec<A> {
    pub fn new(attribute: impl Into<String>, unprivileged: A, privileged: A) -> Result<Self, FairnessError> {
        if unprivileged == privileged {
            return Err(FairnessError::IdenticalGroups);
        }
        Ok(GroupSpec {
            attribute: attribute.into(),
            unprivileged,
            privileged,
        })
    }
}

/// Counts behind every rate of one group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTally {
    pub records: u64,
    pub outcome_positive: u64,
    pub truth_positive: u64,
    /// R=1 among Y=1.
    pub true_positive: u64,
    pub truth_negative: u64,
    /// R=0 among Y=0.
    pub true_negative: u64,
}

impl GroupTally {
    fn add(&mut self, outcome: bool, truth: bool) {
        self.records += 1;
        self.outcome_positive += u64::from(outcome);
        if truth {
            self.truth_positive += 1;
            self.true_positive += u64::from(outcome);
        } else {
            self.truth_negative += 1;
            self.true_negative += u64::from(!outcome);
        }
    }

    pub fn of<'a, A: PartialEq + 'a>(records: impl IntoIterator<Item = &'a OutcomeRecord<A>>, value: &A) -> Self {
        let mut t = GroupTally::default();
        for r in records.into_iter().filter(|r| &r.group == value) {
            t.add(r.outcome, r.truth);
        }
        t
    }
}

fn tallies<A: PartialEq>(records: &[OutcomeRecord<A>], group: &GroupSpec<A>) -> Result<(GroupTally, GroupTally), FairnessError> {
    let u = GroupTally::of(records, &group.unprivileged);
    let p = GroupTally::of(records, &group.privileged);
    if u.records == 0 {
        return Err(FairnessError::EmptyGroup("unprivileged"));
    }
    if p.records == 0 {
        return Err(FairnessError::EmptyGroup("privileged"));
    }
    Ok((u, p))
}

fn di_from(u: &GroupTally, p: &GroupTally) -> Option<Fraction> {
    (p.outcome_positive > 0).then(|| {
        Fraction::new(u.outcome_positive, u.records) / Fraction::new(p.outcome_positive, p.records)
    })
}

fn rate_difference(a: (u64, u64), b: (u64, u64)) -> Option<SignedFraction> {
    let r = |(num, den): (u64, u64)| SignedFraction::new(num as i64, den as i64);
    (a.1 > 0 && b.1 > 0).then(|| r(a) - r(b))
}

fn eod_from(u: &GroupTally, p: &GroupTally) -> (Option<SignedFraction>, Option<SignedFraction>) {
    let eod_0 = rate_difference(
        (u.true_negative, u.truth_negative),
        (p.true_negative, p.truth_negative),
    );
    let eod_1 = rate_difference(
        (u.true_positive, u.truth_positive),
        (p.true_positive, p.truth_positive),
    );
    (eod_0, eod_1)
}

/// `None` when the privileged group never receives a positive outcome.
pub fn disparate_impact<A: PartialEq>(records: &[OutcomeRecord<A>], group: &GroupSpec<A>) -> Result<Option<Fraction>, FairnessError> {
    let (u, p) = tallies(records, group)?;
    Ok(di_from(&u, &p))
}

/// `(EOD_0, EOD_1)`. A component is `None` when either group lacks records
/// with the matching truth label.
pub fn equal_opportunity_difference<A: PartialEq>(
    records: &[OutcomeRecord<A>],
    group: &GroupSpec<A>,
) -> Result<(Option<SignedFraction>, Option<SignedFraction>), FairnessError> {
    let (u, p) = tallies(records, group)?;
    Ok(eod_from(&u, &p))
}

/// Acceptable DI band, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiBounds {
    pub lower: Fraction,
    pub upper: Fraction,
}

impl Default for DiBounds {
    /// Four-fifths rule: [0.8, 1.25].
    fn default() -> Self {
        DiBounds {
            lower: Fraction::new(4, 5),
            upper: Fraction::new(5, 4),
        }
    }
}

impl DiBounds {
    pub fn check(&self, di: Option<Fraction>) -> FourFifths {
        match di {
            None => FourFifths::Undefined,
            Some(d) if self.lower <= d && d <= self.upper => FourFifths::Pass,
            Some(_) => FourFifths::Fail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourFifths {
    Pass,
    Fail,
    Undefined,
}

/// Attribute a labelled pair can be sliced on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairAttribute {
    Sex,
    Age,
    Projection,
    Laterality,
}

impl PairAttribute {
    pub fn as_str(self) -> &'static str {
        match self {
            PairAttribute::Sex => "sex",
            PairAttribute::Age => "age",
            PairAttribute::Projection => "projection",
            PairAttribute::Laterality => "laterality",
        }
    }
}

impl fmt::Display for PairAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairAttribute {
    type Err = FairnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sex" => Ok(PairAttribute::Sex),
            "age" => Ok(PairAttribute::Age),
            "projection" | "proj" => Ok(PairAttribute::Projection),
            "laterality" | "lat" => Ok(PairAttribute::Laterality),
            other => Err(FairnessError::InvalidSelector(format!("unknown attribute {other:?}"))),
        }
    }
}

/// Membership test for one side of a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairGroup {
    Sex(Sex),
    Age(AgeFilter),
    /// `Both` pools A and B, as in "A vs AB".
    Projection(ProjectionFilter),
    Laterality(Laterality),
}

impl PairGroup {
    pub fn parse(attribute: PairAttribute, value: &str) -> Result<Self, FairnessError> {
        let bad = |e: &dyn fmt::Display| FairnessError::InvalidSelector(format!("{attribute} {value:?}: {e}"));
        let v = value.trim();
        Ok(match attribute {
            PairAttribute::Sex => {
                let sex = match v.to_ascii_lowercase().as_str() {
                    "male" => Sex::Male,
                    "female" => Sex::Female,
                    _ => v.parse::<Sex>().map_err(|e| bad(&e))?,
                };
                if sex == Sex::Unknown {
                    return Err(bad(&"unknown sex cannot form a fairness group"));
                }
                PairGroup::Sex(sex)
            }
            PairAttribute::Age => PairGroup::Age(v.parse().map_err(|e| bad(&e))?),
            PairAttribute::Projection => PairGroup::Projection(v.parse().map_err(|e| bad(&e))?),
            PairAttribute::Laterality => PairGroup::Laterality(match v.to_ascii_lowercase().as_str() {
                "left" => Laterality::Left,
                "right" => Laterality::Right,
                _ => v.parse().map_err(|e| bad(&e))?,
            }),
        })
    }

    pub fn attribute(&self) -> PairAttribute {
        match self {
            PairGroup::Sex(_) => PairAttribute::Sex,
            PairGroup::Age(_) => PairAttribute::Age,
            PairGroup::Projection(_) => PairAttribute::Projection,
            PairGroup::Laterality(_) => PairAttribute::Laterality,
        }
    }

    pub fn contains(&self, pair: &LabeledPair) -> bool {
        match self {
            PairGroup::Sex(s) => pair.sex == *s,
            PairGroup::Age(f) => f.matches(pair.age),
            PairGroup::Projection(ProjectionFilter::Both) => true,
            PairGroup::Projection(f) => pair.projection.is_some_and(|p| f.matches(p)),
            PairGroup::Laterality(l) => pair.laterality == Some(*l),
        }
    }
}

impl fmt::Display for PairGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairGroup::Sex(Sex::Male) => f.write_str("Male"),
            PairGroup::Sex(Sex::Female) => f.write_str("Female"),
            PairGroup::Sex(Sex::Unknown) => f.write_str("Unknown"),
            PairGroup::Age(a) => write!(f, "{a}"),
            PairGroup::Projection(p) => write!(f, "{p}"),
            PairGroup::Laterality(Laterality::Left) => f.write_str("Left"),
            PairGroup::Laterality(Laterality::Right) => f.write_str("Right"),
        }
    }
}

/// Comparison of two pair groups on one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairGroupSpec {
    pub attribute: PairAttribute,
    pub unprivileged: PairGroup,
    pub privileged: PairGroup,
}

impl PairGroupSpec {
    pub fn new(unprivileged: PairGroup, privileged: PairGroup) -> Result<Self, FairnessError> {
        if unprivileged.attribute() != privileged.attribute() {
            return Err(FairnessError::InvalidSelector(
                "groups compare different attributes".to_string(),
            ));
        }
        if unprivileged == privileged {
            return Err(FairnessError::IdenticalGroups);
        }
        Ok(PairGroupSpec {
            attribute: unprivileged.attribute(),
            unprivileged,
            privileged,
        })
    }

    pub fn parse(attribute: &str, unprivileged: &str, privileged: &str) -> Result<Self, FairnessError> {
        let attribute: PairAttribute = attribute.parse()?;
        PairGroupSpec::new(
            PairGroup::parse(attribute, unprivileged)?,
            PairGroup::parse(attribute, privileged)?,
        )
    }

    pub fn swapped(&self) -> Self {
        PairGroupSpec {
            attribute: self.attribute,
            unprivileged: self.privileged,
            privileged: self.unprivileged,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Unprivileged,
    Privileged,
}

/// One row of the fairness table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FairnessReport {
    pub feature: PairAttribute,
    pub unit: Option<EvalUnit>,
    pub unprivileged: String,
    pub privileged: String,
    pub di: Option<Fraction>,
    pub eod_0: Option<SignedFraction>,
    pub eod_1: Option<SignedFraction>,
    pub four_fifths: FourFifths,
    pub unprivileged_counts: GroupTally,
    pub privileged_counts: GroupTally,
    /// Some units fell in both groups (e.g. A against pooled AB).
    pub overlapping: bool,
}

impl FairnessReport {
    pub fn with_unit(mut self, unit: EvalUnit) -> Self {
        self.unit = Some(unit);
        self
    }
}

/// Outcome records for a pair comparison. A pair that belongs to both
/// groups yields one record per side.
pub fn outcome_records(pairs: &[LabeledPair], group: &PairGroupSpec) -> (Vec<OutcomeRecord<Side>>, bool) {
    let mut records = Vec::with_capacity(pairs.len());
    let mut overlapping = false;
    for pair in pairs {
        let (Some(truth), Some(outcome)) = (pair.truth.code(), pair.prediction.code()) else {
            continue;
        };
        let (truth, outcome) = (truth == 1, outcome == 1);
        let u = group.unprivileged.contains(pair);
        let p = group.privileged.contains(pair);
        overlapping |= u && p;
        if u {
            records.push(OutcomeRecord { outcome, truth, group: Side::Unprivileged });
        }
        if p {
            records.push(OutcomeRecord { outcome, truth, group: Side::Privileged });
        }
    }
    (records, overlapping)
}

pub fn fairness_report(pairs: &[LabeledPair], group: &PairGroupSpec, bounds: &DiBounds) -> Result<FairnessReport, FairnessError> {
    let (records, overlapping) = outcome_records(pairs, group);
    let spec = GroupSpec {
        attribute: group.attribute.to_string(),
        unprivileged: Side::Unprivileged,
        privileged: Side::Privileged,
    };
    let (u, p) = tallies(&records, &spec)?;
    let di = di_from(&u, &p);
    let (eod_0, eod_1) = eod_from(&u, &p);
    Ok(FairnessReport {
        feature: group.attribute,
        unit: None,
        unprivileged: group.unprivileged.to_string(),
        privileged: group.privileged.to_string(),
        di,
        eod_0,
        eod_1,
        four_fifths: bounds.check(di),
        unprivileged_counts: u,
        privileged_counts: p,
        overlapping,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    fn records(spec: &[(&'static str, bool, bool, usize)]) -> Vec<OutcomeRecord<&'static str>> {
        let mut out = Vec::new();
        for &(g, outcome, truth, n) in spec {
            for _ in 0..n {
                out.push(OutcomeRecord { outcome, truth, group: g });
            }
        }
        out
    }

    fn spec() -> GroupSpec<&'static str> {
        GroupSpec::new("g", "u", "p").unwrap()
    }

    #[test]
    fn equal_rates_give_unit_di() {
        let r = records(&[("u", true, true, 3), ("u", false, false, 7), ("p", true, false, 6), ("p", false, true, 14)]);
        assert_eq!(disparate_impact(&r, &spec()).unwrap(), Some(Fraction::from_integer(1)));
    }

    #[test]
    fn direct_ratio() {
        let r = records(&[("u", true, true, 5), ("u", false, true, 15), ("p", true, true, 10), ("p", false, true, 10)]);
        assert_eq!(disparate_impact(&r, &spec()).unwrap(), Some(Fraction::new(1, 2)));
    }

    #[test]
    fn privileged_without_positives_is_undefined() {
        let r = records(&[("u", true, true, 1), ("p", false, true, 3)]);
        assert_eq!(disparate_impact(&r, &spec()).unwrap(), None);
    }

    #[test]
    fn empty_group_is_an_error() {
        let r = records(&[("u", true, true, 1)]);
        assert_eq!(disparate_impact(&r, &spec()), Err(FairnessError::EmptyGroup("privileged")));
        assert_eq!(GroupSpec::new("g", "u", "u"), Err(FairnessError::IdenticalGroups));
    }

    #[test]
    fn eod_direct_subtraction() {
        let r = records(&[
            ("u", true, true, 9),
            ("u", false, true, 1),
            ("p", true, true, 8),
            ("p", false, true, 2),
            ("u", false, false, 5),
            ("p", false, false, 5),
        ]);
        let (eod_0, eod_1) = equal_opportunity_difference(&r, &spec()).unwrap();
        assert_eq!(eod_1, Some(SignedFraction::new(1, 10)));
        assert_eq!(eod_0, Some(SignedFraction::from_integer(0)));
    }

    #[test]
    fn eod_undefined_without_label_stratum() {
        let r = records(&[("u", true, true, 2), ("p", true, true, 2), ("p", false, false, 2)]);
        let (eod_0, eod_1) = equal_opportunity_difference(&r, &spec()).unwrap();
        assert_eq!(eod_0, None);
        assert_eq!(eod_1, Some(SignedFraction::from_integer(0)));
    }

    #[test]
    fn four_fifths_band() {
        let b = DiBounds::default();
        assert_eq!(b.check(Some(Fraction::new(1, 2))), FourFifths::Fail);
        assert_eq!(b.check(Some(Fraction::new(4, 5))), FourFifths::Pass);
        assert_eq!(b.check(Some(Fraction::new(5, 4))), FourFifths::Pass);
        assert_eq!(b.check(Some(Fraction::new(126, 100))), FourFifths::Fail);
        assert_eq!(b.check(None), FourFifths::Undefined);
    }

    #[test]
    fn selectors_parse() {
        let s = PairGroupSpec::parse("sex", "M", "F").unwrap();
        assert_eq!(s.unprivileged, PairGroup::Sex(Sex::Male));
        assert!(PairGroupSpec::parse("sex", "U", "F").is_err());
        assert!(PairGroupSpec::parse("sex", "M", "M").is_err());
        let s = PairGroupSpec::parse("projection", "A", "AB").unwrap();
        assert_eq!(s.privileged, PairGroup::Projection(ProjectionFilter::Both));
        let s = PairGroupSpec::parse("age", "<60", ">=60").unwrap();
        assert_eq!(s.unprivileged.to_string(), "<60");
        assert!(PairGroupSpec::parse("height", "a", "b").is_err());
        assert_eq!(
            PairGroupSpec::parse("laterality", "Left", "R").unwrap().privileged,
            PairGroup::Laterality(Laterality::Right)
        );
    }
}
