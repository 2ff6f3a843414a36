//! Per-image decision flow.
//!
//! ```text
//! MQ ─► MA ─► gate ──pass──► M1 ──0──► M2 ──0──► review in 12 months
//!              │                 │          └─1──► review in 6 months
//!              │                 └─1──► M3 ──0/1──► refer to specialist (R3/R4)
//!              └─fail──► MD decision ──retake──► retake (or refer if retakes exhausted)
//!                                    └─proceed──► refer as ungradable
//! ```
//!
//! A screening either finishes in one pass or stops at the MD gate as a
//! [`PendingScreening`], which is resolved later with an [`MdDecision`].
//! [`run_screening`] drives both halves with a synchronous [`MdProvider`].

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grade::{Disposition, Grade, ReferralCategory, ReferralScheme};
use crate::inference::{
    AnatomyOutput, BackendError, ClassifierOutput, InferenceBackend, ModelId, ModelInput, ModelThresholds,
};
use crate::preprocess::StandardImage;

/// Hard ceiling on `ScreeningPolicy::max_retakes`.
pub const MAX_RETAKES_LIMIT: u8 = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkflowError {
    #[error("{stage} failed: {source}")]
    Backend {
        stage: ModelId,
        #[source]
        source: BackendError,
    },
    #[error("invalid screening policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreeningPolicy {
    pub quality_threshold: f64,
    pub require_macula: bool,
    pub require_optic_nerve: bool,
    pub max_retakes: u8,
    pub thresholds: ModelThresholds,
}

impl Default for ScreeningPolicy {
    fn default() -> Self {
        ScreeningPolicy {
            quality_threshold: 0.5,
            require_macula: true,
            require_optic_nerve: true,
            max_retakes: 2,
            thresholds: ModelThresholds::default(),
        }
    }
}

impl ScreeningPolicy {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return Err(WorkflowError::InvalidPolicy(alloc::format!(
                "quality_threshold {} outside [0, 1]",
                self.quality_threshold
            )));
        }
        if !self.thresholds.is_valid() {
            return Err(WorkflowError::InvalidPolicy(
                "model thresholds must lie in [0, 1]".to_string(),
            ));
        }
        if self.max_retakes > MAX_RETAKES_LIMIT {
            return Err(WorkflowError::InvalidPolicy(alloc::format!(
                "max_retakes {} exceeds {MAX_RETAKES_LIMIT}",
                self.max_retakes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateFailure {
    LowQuality,
    MissingMacula,
    MissingOpticNerve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVerdict {
    Pass,
    Fail(GateFailure),
}

impl GateVerdict {
    pub fn passed(self) -> bool {
        self == GateVerdict::Pass
    }
}

/// Image is gradable iff MQ reaches the quality threshold and every
/// required structure was detected. Low quality is reported before missing
/// anatomy, macula before optic nerve.
pub fn quality_gate(mq: &ClassifierOutput, anatomy: &AnatomyOutput, policy: &ScreeningPolicy) -> GateVerdict {
    if mq.score() < policy.quality_threshold {
        GateVerdict::Fail(GateFailure::LowQuality)
    } else if policy.require_macula && !anatomy.macula.present {
        GateVerdict::Fail(GateFailure::MissingMacula)
    } else if policy.require_optic_nerve && !anatomy.optic_nerve.present {
        GateVerdict::Fail(GateFailure::MissingOpticNerve)
    } else {
        GateVerdict::Pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdDecision {
    #[serde(rename = "retake")]
    RetakeImage,
    ProceedUngradable,
}

/// Question put to the on-site decision maker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdRequest {
    pub image_id: String,
    pub reason: GateFailure,
    /// Retakes already taken for this image.
    pub attempt: u8,
}

/// Synchronous source of MD decisions (console prompt, preset policy).
pub trait MdProvider {
    fn decide(&mut self, request: &MdRequest) -> MdDecision;
}

/// Always answers the same way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetMd(pub MdDecision);

impl MdProvider for PresetMd {
    fn decide(&mut self, _request: &MdRequest) -> MdDecision {
        self.0
    }
}

impl<F: FnMut(&MdRequest) -> MdDecision> MdProvider for F {
    fn decide(&mut self, request: &MdRequest) -> MdDecision {
        self(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "quality")]
    Quality,
    #[serde(rename = "anatomy")]
    Anatomy,
    #[serde(rename = "md_gate")]
    MdGate,
    M1,
    M2,
    M3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageDecision {
    Pass,
    Fail(GateFailure),
    Label(u8),
    Retake,
    ProceedUngradable,
    RetakeLimitExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageOutput {
    Classifier { label: u8, score: f64 },
    Anatomy(AnatomyOutput),
    Md { reason: GateFailure, decision: MdDecision },
}

impl From<ClassifierOutput> for StageOutput {
    fn from(c: ClassifierOutput) -> Self {
        StageOutput::Classifier {
            label: c.label(),
            score: c.score(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub output: StageOutput,
    pub decision: StageDecision,
}

/// Grades a completed grading path can claim. M2 cannot separate R0 from R1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradeCall {
    #[serde(rename = "R0|R1")]
    R0OrR1,
    R2,
    R3,
    R4,
}

impl GradeCall {
    pub fn grades(self) -> &'static [Grade] {
        match self {
            GradeCall::R0OrR1 => &[Grade::R0, Grade::R1],
            GradeCall::R2 => &[Grade::R2],
            GradeCall::R3 => &[Grade::R3],
            GradeCall::R4 => &[Grade::R4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpliedReferral {
    pub rdr: ReferralCategory,
    pub acr: ReferralCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub image_id: String,
    pub attempt: u8,
    pub trace: Vec<StageRecord>,
    pub quality: GateVerdict,
    pub disposition: Disposition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<GradeCall>,
    /// Absent for `Retake`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referral: Option<ImpliedReferral>,
    #[serde(default)]
    pub retake_limit_exceeded: bool,
}

impl ScreeningResult {
    fn new(
        image_id: String,
        attempt: u8,
        trace: Vec<StageRecord>,
        quality: GateVerdict,
        disposition: Disposition,
        grade: Option<GradeCall>,
    ) -> Self {
        let referral = match (
            disposition.referral(ReferralScheme::Rdr),
            disposition.referral(ReferralScheme::Acr),
        ) {
            (Some(rdr), Some(acr)) => Some(ImpliedReferral { rdr, acr }),
            _ => None,
        };
        ScreeningResult {
            image_id,
            attempt,
            trace,
            quality,
            disposition,
            grade,
            referral,
            retake_limit_exceeded: false,
        }
    }

    pub fn referral(&self, scheme: ReferralScheme) -> Option<ReferralCategory> {
        self.disposition.referral(scheme)
    }

    /// Score of the referral model, when the image got that far.
    pub fn referral_score(&self) -> Option<f64> {
        self.trace.iter().find_map(|s| match (s.stage, s.output) {
            (Stage::M1, StageOutput::Classifier { score, .. }) => Some(score),
            _ => None,
        })
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.trace.iter().find(|s| s.stage == stage)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScreeningInput<'a> {
    pub image_id: &'a str,
    pub image: Option<&'a StandardImage>,
    /// Retakes already taken for this image (0 on first capture).
    pub attempt: u8,
}

impl<'a> ScreeningInput<'a> {
    pub fn id(image_id: &'a str) -> Self {
        ScreeningInput {
            image_id,
            image: None,
            attempt: 0,
        }
    }

    fn model_input(&self) -> ModelInput<'a> {
        ModelInput {
            image_id: self.image_id,
            image: self.image,
        }
    }
}

/// A screening stopped at the MD gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingScreening {
    pub image_id: String,
    pub attempt: u8,
    pub trace: Vec<StageRecord>,
    pub reason: GateFailure,
}

impl PendingScreening {
    pub fn request(&self) -> MdRequest {
        MdRequest {
            image_id: self.image_id.clone(),
            reason: self.reason,
            attempt: self.attempt,
        }
    }

    pub fn resolve(self, decision: MdDecision, policy: &ScreeningPolicy) -> ScreeningResult {
        let PendingScreening {
            image_id,
            attempt,
            mut trace,
            reason,
        } = self;
        let exhausted = decision == MdDecision::RetakeImage && attempt >= policy.max_retakes;
        let (stage_decision, disposition) = match decision {
            MdDecision::RetakeImage if exhausted => {
                (StageDecision::RetakeLimitExceeded, Disposition::ReferUngradable)
            }
            MdDecision::RetakeImage => (StageDecision::Retake, Disposition::Retake),
            MdDecision::ProceedUngradable => (StageDecision::ProceedUngradable, Disposition::ReferUngradable),
        };
        trace.push(StageRecord {
            stage: Stage::MdGate,
            output: StageOutput::Md { reason, decision },
            decision: stage_decision,
        });
        let mut result = ScreeningResult::new(
            image_id,
            attempt,
            trace,
            GateVerdict::Fail(reason),
            disposition,
            None,
        );
        result.retake_limit_exceeded = exhausted;
        result
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScreeningStep {
    Complete(ScreeningResult),
    AwaitingMd(PendingScreening),
}

fn backend_err(stage: ModelId) -> impl FnOnce(BackendError) -> WorkflowError {
    move |source| WorkflowError::Backend { stage, source }
}

/// Run the automatic part of the flow, stopping at the MD gate if the
/// image fails quality.
pub fn begin_screening<B: InferenceBackend + ?Sized>(
    input: ScreeningInput<'_>,
    backend: &B,
    policy: &ScreeningPolicy,
) -> Result<ScreeningStep, WorkflowError> {
    policy.validate()?;
    let model_input = input.model_input();
    let mut trace = Vec::with_capacity(5);

    let mq = backend
        .classify(ModelId::MQ, model_input)
        .map_err(backend_err(ModelId::MQ))?;
    let anatomy = backend
        .detect_anatomy(model_input)
        .map_err(backend_err(ModelId::MA))?;
    let verdict = quality_gate(&mq, &anatomy, policy);

    trace.push(StageRecord {
        stage: Stage::Quality,
        output: mq.into(),
        decision: if mq.score() < policy.quality_threshold {
            StageDecision::Fail(GateFailure::LowQuality)
        } else {
            StageDecision::Pass
        },
    });
    trace.push(StageRecord {
        stage: Stage::Anatomy,
        output: StageOutput::Anatomy(anatomy),
        decision: if policy.require_macula && !anatomy.macula.present {
            StageDecision::Fail(GateFailure::MissingMacula)
        } else if policy.require_optic_nerve && !anatomy.optic_nerve.present {
            StageDecision::Fail(GateFailure::MissingOpticNerve)
        } else {
            StageDecision::Pass
        },
    });

    if let GateVerdict::Fail(reason) = verdict {
        return Ok(ScreeningStep::AwaitingMd(PendingScreening {
            image_id: input.image_id.to_string(),
            attempt: input.attempt,
            trace,
            reason,
        }));
    }

    let m1 = backend
        .classify(ModelId::M1, model_input)
        .map_err(backend_err(ModelId::M1))?;
    trace.push(StageRecord {
        stage: Stage::M1,
        output: m1.into(),
        decision: StageDecision::Label(m1.label()),
    });

    let (model, stage) = if m1.positive() {
        (ModelId::M3, Stage::M3)
    } else {
        (ModelId::M2, Stage::M2)
    };
    let grader = backend.classify(model, model_input).map_err(backend_err(model))?;
    trace.push(StageRecord {
        stage,
        output: grader.into(),
        decision: StageDecision::Label(grader.label()),
    });

    let (disposition, grade) = match (stage, grader.positive()) {
        (Stage::M2, false) => (Disposition::Review12Months, GradeCall::R0OrR1),
        (Stage::M2, true) => (Disposition::Review6Months, GradeCall::R2),
        (_, false) => (Disposition::ReferSpecialist, GradeCall::R3),
        (_, true) => (Disposition::ReferSpecialist, GradeCall::R4),
    };

    Ok(ScreeningStep::Complete(ScreeningResult::new(
        input.image_id.to_string(),
        input.attempt,
        trace,
        verdict,
        disposition,
        Some(grade),
    )))
}

/// Screen one image end to end, asking `md` when the gate fails.
pub fn run_screening<B: InferenceBackend + ?Sized, M: MdProvider + ?Sized>(
    input: ScreeningInput<'_>,
    backend: &B,
    policy: &ScreeningPolicy,
    md: &mut M,
) -> Result<ScreeningResult, WorkflowError> {
    match begin_screening(input, backend, policy)? {
        ScreeningStep::Complete(result) => Ok(result),
        ScreeningStep::AwaitingMd(pending) => {
            let decision = md.decide(&pending.request());
            Ok(pending.resolve(decision, policy))
        }
    }
}
