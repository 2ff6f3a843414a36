//! Labelled validation cohorts and the synthetic cohort generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grade::{Grade, Laterality, Projection, Sex};

/// Inclusion criterion: adults only.
pub const MIN_AGE: u16 = 18;
/// Two eyes, two projections each.
pub const MAX_IMAGES_PER_PATIENT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CohortError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("duplicate patient {0:?}")]
    DuplicatePatient(String),
    #[error("duplicate image {0:?}")]
    DuplicateImage(String),
    #[error("patient {patient_id:?} already has a {laterality}/{projection} image")]
    DuplicateSlot {
        patient_id: String,
        laterality: Laterality,
        projection: Projection,
    },
    #[error("image {image_id:?} references unknown patient {patient_id:?}")]
    OrphanImage { image_id: String, patient_id: String },
    #[error("patient {patient_id:?} is {age}, below the minimum age {MIN_AGE}")]
    Underage { patient_id: String, age: u16 },
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
}

/// Majority grade of the three graders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consensus {
    pub grade: Grade,
    /// Set when all three graders disagreed and the most severe gradable
    /// grade was taken.
    pub tie_break: bool,
}

/// Grade held by at least two graders; with three distinct grades, the most
/// severe gradable one.
pub fn consensus_grade(grades: [Grade; 3]) -> Consensus {
    let [a, b, c] = grades;
    if a == b || a == c {
        return Consensus { grade: a, tie_break: false };
    }
    if b == c {
        return Consensus { grade: b, tie_break: false };
    }
    // Three distinct values include at most R5 and R6 outside the scale,
    // so at least one is gradable.
    let grade = grades
        .into_iter()
        .filter(|g| g.is_gradable())
        .max_by_key(|g| g.severity())
        .expect("three distinct grades include a gradable one");
    Consensus { grade, tie_break: true }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub laterality: Laterality,
    pub projection: Projection,
    pub grades: [Grade; 3],
    pub consensus: Grade,
    pub tie_break: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        patient_id: impl Into<String>,
        laterality: Laterality,
        projection: Projection,
        grades: [Grade; 3],
        image_path: Option<String>,
    ) -> Self {
        let c = consensus_grade(grades);
        ImageRecord {
            image_id: image_id.into(),
            patient_id: patient_id.into(),
            laterality,
            projection,
            grades,
            consensus: c.grade,
            tie_break: c.tie_break,
            image_path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: u16,
    pub sex: Sex,
}

/// A validated set of patients and their images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cohort {
    patients: Vec<PatientRecord>,
    images: Vec<ImageRecord>,
    provenance: String,
    by_patient: BTreeMap<String, usize>,
}

impl Cohort {
    pub fn new(
        patients: Vec<PatientRecord>,
        images: Vec<ImageRecord>,
        provenance: impl Into<String>,
    ) -> Result<Self, CohortError> {
        let mut by_patient = BTreeMap::new();
        for (i, p) in patients.iter().enumerate() {
            if p.age < MIN_AGE {
                return Err(CohortError::Underage {
                    patient_id: p.patient_id.clone(),
                    age: p.age,
                });
            }
            if by_patient.insert(p.patient_id.clone(), i).is_some() {
                return Err(CohortError::DuplicatePatient(p.patient_id.clone()));
            }
        }

        let mut ids = BTreeSet::new();
        let mut slots = BTreeSet::new();
        for img in &images {
            if !by_patient.contains_key(&img.patient_id) {
                return Err(CohortError::OrphanImage {
                    image_id: img.image_id.clone(),
                    patient_id: img.patient_id.clone(),
                });
            }
            if !ids.insert(img.image_id.as_str()) {
                return Err(CohortError::DuplicateImage(img.image_id.clone()));
            }
            if !slots.insert((img.patient_id.as_str(), img.laterality, img.projection)) {
                return Err(CohortError::DuplicateSlot {
                    patient_id: img.patient_id.clone(),
                    laterality: img.laterality,
                    projection: img.projection,
                });
            }
            let recomputed = consensus_grade(img.grades);
            if (recomputed.grade, recomputed.tie_break) != (img.consensus, img.tie_break) {
                return Err(CohortError::Value(format!(
                    "image {:?} carries consensus {} but its grades give {}",
                    img.image_id, img.consensus, recomputed.grade
                )));
            }
        }

        Ok(Cohort {
            patients,
            images,
            provenance: provenance.into(),
            by_patient,
        })
    }

    pub fn empty() -> Self {
        Cohort {
            patients: Vec::new(),
            images: Vec::new(),
            provenance: String::new(),
            by_patient: BTreeMap::new(),
        }
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn patient(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.by_patient.get(patient_id).map(|&i| &self.patients[i])
    }

    /// Images grouped by patient, in patient order.
    pub fn images_by_patient(&self) -> Vec<(&PatientRecord, Vec<&ImageRecord>)> {
        let mut groups: Vec<Vec<&ImageRecord>> = vec![Vec::new(); self.patients.len()];
        for img in &self.images {
            groups[self.by_patient[&img.patient_id]].push(img);
        }
        self.patients.iter().zip(groups).collect()
    }
}

/// Patient counts per consensus severity group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub r0_r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub r4: usize,
    pub ungradable: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.r0_r1 + self.r2 + self.r3 + self.r4 + self.ungradable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub n_patients: usize,
    pub female_fraction: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub groups: GroupCounts,
}

impl SyntheticParams {
    /// Marginals of the 1046-patient assessed validation cohort. The
    /// ungradable count is derived as 1046 assessed minus 797 fully
    /// gradable.
    pub fn table3() -> Self {
        SyntheticParams {
            n_patients: 1046,
            female_fraction: 0.657,
            age_mean: 60.4,
            age_sd: 12.1,
            groups: GroupCounts {
                r0_r1: 679,
                r2: 64,
                r3: 28,
                r4: 26,
                ungradable: 249,
            },
        }
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        if self.groups.total() != self.n_patients {
            return Err(CohortError::InvalidParams(format!(
                "group counts sum to {}, expected {}",
                self.groups.total(),
                self.n_patients
            )));
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return Err(CohortError::InvalidParams(format!(
                "female_fraction {} outside [0, 1]",
                self.female_fraction
            )));
        }
        if !self.age_mean.is_finite() || !self.age_sd.is_finite() || self.age_sd < 0.0 {
            return Err(CohortError::InvalidParams(
                "age mean and sd must be finite, sd non-negative".to_string(),
            ));
        }
        Ok(())
    }

    pub fn female_count(&self) -> usize {
        libm::round(self.female_fraction * self.n_patients as f64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SeverityGroup {
    LowGrade,
    R2,
    R3,
    R4,
    Ungradable,
}

pub fn image_id(patient_id: &str, laterality: Laterality, projection: Projection) -> String {
    format!("{patient_id}-{laterality}{projection}")
}

/// Build a seed-deterministic cohort with exact group and sex counts.
///
/// Every patient gets four unanimously graded images (both eyes, both
/// projections) carrying the patient's grade; the R0/R1 group picks R0 or
/// R1 per patient with equal odds. Ages are stratified draws from the
/// normal distribution truncated at 18: patient `i` takes a uniform point
/// inside stratum `perm(i)` of `n` equal-probability strata, which keeps the
/// sample mean on target for every seed.
pub fn generate_synthetic(params: &SyntheticParams, seed: u64) -> Result<Cohort, CohortError> {
    params.validate()?;
    let n = params.n_patients;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let g = params.groups;
    let mut groups = Vec::with_capacity(n);
    for (group, count) in [
        (SeverityGroup::LowGrade, g.r0_r1),
        (SeverityGroup::R2, g.r2),
        (SeverityGroup::R3, g.r3),
        (SeverityGroup::R4, g.r4),
        (SeverityGroup::Ungradable, g.ungradable),
    ] {
        groups.extend(core::iter::repeat_n(group, count));
    }
    groups.shuffle(&mut rng);

    let females = params.female_count();
    let mut sexes: Vec<Sex> = core::iter::repeat_n(Sex::Female, females)
        .chain(core::iter::repeat_n(Sex::Male, n - females))
        .collect();
    sexes.shuffle(&mut rng);

    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(&mut rng);

    let width = n.max(1).to_string().len().max(4);
    let mut patients = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * MAX_IMAGES_PER_PATIENT);
    for i in 0..n {
        let patient_id = format!("P{:0width$}", i + 1);
        let u = (strata[i] as f64 + rng.random::<f64>()) / n as f64;
        let age = params.age_mean + params.age_sd * inverse_normal_cdf(u);
        let age = libm::round(age.max(MIN_AGE as f64)).min(u16::MAX as f64) as u16;

        let grade = match groups[i] {
            SeverityGroup::LowGrade => {
                if rng.random_bool(0.5) {
                    Grade::R1
                } else {
                    Grade::R0
                }
            }
            SeverityGroup::R2 => Grade::R2,
            SeverityGroup::R3 => Grade::R3,
            SeverityGroup::R4 => Grade::R4,
            SeverityGroup::Ungradable => Grade::R6,
        };

        for laterality in [Laterality::Left, Laterality::Right] {
            for projection in [Projection::A, Projection::B] {
                images.push(ImageRecord::new(
                    image_id(&patient_id, laterality, projection),
                    patient_id.clone(),
                    laterality,
                    projection,
                    [grade; 3],
                    None,
                ));
            }
        }
        patients.push(PatientRecord {
            patient_id,
            age,
            sex: sexes[i],
        });
    }

    Cohort::new(patients, images, format!("synthetic seed={seed}"))
}

/// Standard normal quantile function (Acklam's rational approximation,
/// relative error below 1.2e-9). Saturates at +-8.5 for p at 0 or 1.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return -8.5;
    }
    if p >= 1.0 {
        return 8.5;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail(libm::sqrt(-2.0 * libm::log(p)))
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(libm::sqrt(-2.0 * libm::log(1.0 - p)))
    }
}
