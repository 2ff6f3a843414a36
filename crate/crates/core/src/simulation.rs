//! Model outputs for a labelled cohort: the answer a perfect system would
//! give, with a seeded share of each patient class corrupted.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, ImageRecord};
use crate::grade::Grade;
use crate::inference::{ModelId, ModelThresholds, PredictionRow};
use crate::metrics::Fraction;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimulationError {
    #[error("invalid flip rates {0:?}: expected e.g. FN=5/54,FP=0.04,UNG=0")]
    InvalidRates(String),
}

/// Patient classes, each with its own way of being wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatientClass {
    /// Any image R3 or R4. A flip calls every image R0.
    Referable,
    /// Gradable, nothing above R2. A flip calls every image R3.
    NonReferable,
    /// Every image R6. A flip calls every image a gradable R0.
    Ungradable,
}

impl PatientClass {
    /// `None` for patients with only enucleated eyes.
    pub fn of(images: &[&ImageRecord]) -> Option<PatientClass> {
        let grades: Vec<Grade> = images.iter().map(|i| i.consensus).filter(|g| *g != Grade::R5).collect();
        if grades.is_empty() {
            None
        } else if grades.iter().any(|g| matches!(g, Grade::R3 | Grade::R4)) {
            Some(PatientClass::Referable)
        } else if grades.iter().all(|g| *g == Grade::R6) {
            Some(PatientClass::Ungradable)
        } else {
            Some(PatientClass::NonReferable)
        }
    }

    fn flipped_grade(self) -> Grade {
        match self {
            PatientClass::Referable | PatientClass::Ungradable => Grade::R0,
            PatientClass::NonReferable => Grade::R3,
        }
    }
}

/// Share of each class to corrupt. Counts are `round(rate * class size)`,
/// halves rounded up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlipRates {
    pub false_negative: Fraction,
    pub false_positive: Fraction,
    pub ungradable: Fraction,
}

impl FlipRates {
    pub fn rate(&self, class: PatientClass) -> Fraction {
        match class {
            PatientClass::Referable => self.false_negative,
            PatientClass::NonReferable => self.false_positive,
            PatientClass::Ungradable => self.ungradable,
        }
    }

    pub fn count(&self, class: PatientClass, size: usize) -> usize {
        let x = self.rate(class) * Fraction::from_integer(size as u64);
        ((2 * *x.numer() + *x.denom()) / (2 * *x.denom())) as usize
    }
}

fn parse_rate(s: &str) -> Option<Fraction> {
    let s = s.trim();
    let r = if let Some((n, d)) = s.split_once('/') {
        let (n, d): (u64, u64) = (n.trim().parse().ok()?, d.trim().parse().ok()?);
        (d > 0).then(|| Fraction::new(n, d))?
    } else if let Some((int, frac)) = s.split_once('.') {
        if frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
        let scale = 10u64.pow(frac.len() as u32);
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
        Fraction::new(int * scale + frac, scale)
    } else {
        Fraction::from_integer(s.parse().ok()?)
    };
    (r <= Fraction::from_integer(1)).then_some(r)
}

impl FromStr for FlipRates {
    type Err = SimulationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SimulationError::InvalidRates(s.into());
        let mut rates = FlipRates::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            let r = parse_rate(v).ok_or_else(bad)?;
            match k.trim().to_ascii_uppercase().as_str() {
                "FN" => rates.false_negative = r,
                "FP" => rates.false_positive = r,
                "UNG" => rates.ungradable = r,
                _ => return Err(bad()),
            }
        }
        Ok(rates)
    }
}

impl fmt::Display for FlipRates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FN={},FP={},UNG={}", self.false_negative, self.false_positive, self.ungradable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub rows: Vec<PredictionRow>,
    /// Corrupted patients and the class they came from.
    pub flipped: BTreeMap<String, PatientClass>,
}

impl Simulation {
    pub fn flip_count(&self, class: PatientClass) -> usize {
        self.flipped.values().filter(|c| **c == class).count()
    }
}

/// Score on the correct side of `threshold`.
fn score(rng: &mut ChaCha8Rng, positive: bool, threshold: f64) -> f64 {
    let u: f64 = rng.random();
    if positive {
        threshold + u * (1.0 - threshold)
    } else {
        // Strictly below the threshold.
        u * threshold * 0.999
    }
}

/// Model outputs for every image of `cohort`: MQ, MA, M1, M2 and M3 rows
/// consistent with the called grade. R5 images get no rows.
pub fn simulate_predictions(cohort: &Cohort, rates: &FlipRates, thresholds: &ModelThresholds, seed: u64) -> Simulation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patients = cohort.images_by_patient();

    let mut by_class: BTreeMap<PatientClass, Vec<&str>> = BTreeMap::new();
    for (p, imgs) in &patients {
        if let Some(c) = PatientClass::of(imgs) {
            by_class.entry(c).or_default().push(&p.patient_id);
        }
    }
    let mut flipped = BTreeMap::new();
    for (class, mut ids) in by_class {
        let k = rates.count(class, ids.len());
        ids.shuffle(&mut rng);
        for id in ids.into_iter().take(k) {
            flipped.insert(String::from(id), class);
        }
    }

    let mut rows = Vec::with_capacity(cohort.images().len() * 5);
    for img in cohort.images() {
        if img.consensus == Grade::R5 {
            continue;
        }
        let called = flipped
            .get(&img.patient_id)
            .map_or(img.consensus, |c: &PatientClass| c.flipped_grade());
        let outputs = [
            (ModelId::MQ, called != Grade::R6),
            (ModelId::MA, true),
            (ModelId::M1, matches!(called, Grade::R3 | Grade::R4)),
            (ModelId::M2, called == Grade::R2),
            (ModelId::M3, called == Grade::R4),
        ];
        for (model, positive) in outputs {
            let s = score(&mut rng, positive, thresholds.get(model));
            rows.push(PredictionRow {
                image_id: img.image_id.clone(),
                model,
                label: Some(u8::from(positive)),
                score: s,
            });
        }
    }
    Simulation { rows, flipped }
}
