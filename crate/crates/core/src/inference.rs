//! Model outputs, per-model decision thresholds and the backend interface.
//!
//! Every backend answers for five models: the quality classifier (MQ), the
//! anatomy detector (MA), the referral classifier (M1) and the two grading
//! classifiers (M2 low grades, M3 high grades). Background removal is done
//! by [`crate::preprocess`] and has no model id here.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ParseError;
use crate::preprocess::StandardImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelId {
    MQ,
    MA,
    M1,
    M2,
    M3,
}

impl ModelId {
    pub const ALL: [ModelId; 5] = [ModelId::MQ, ModelId::MA, ModelId::M1, ModelId::M2, ModelId::M3];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::MQ => "MQ",
            ModelId::MA => "MA",
            ModelId::M1 => "M1",
            ModelId::M2 => "M2",
            ModelId::M3 => "M3",
        }
    }

    pub fn is_classifier(self) -> bool {
        self != ModelId::MA
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| ParseError::new("model", s))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("no prediction for image {image_id:?} from model {model}")]
    MissingPrediction { image_id: String, model: ModelId },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid output: {0}")]
    InvalidOutput(String),
    #[error("model {0} is not a binary classifier")]
    UnsupportedModel(ModelId),
    #[error("duplicate manifest entry for image {image_id:?}, model {model}")]
    DuplicateKey { image_id: String, model: ModelId },
    #[error("malformed manifest: {0}")]
    Parse(String),
}

/// Per-model decision thresholds. `ma` applies to both anatomy detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelThresholds {
    pub mq: f64,
    pub ma: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl Default for ModelThresholds {
    fn default() -> Self {
        ModelThresholds {
            mq: 0.5,
            ma: 0.5,
            m1: 0.5,
            m2: 0.5,
            m3: 0.5,
        }
    }
}

impl ModelThresholds {
    pub fn get(&self, model: ModelId) -> f64 {
        match model {
            ModelId::MQ => self.mq,
            ModelId::MA => self.ma,
            ModelId::M1 => self.m1,
            ModelId::M2 => self.m2,
            ModelId::M3 => self.m3,
        }
    }

    pub fn set(&mut self, model: ModelId, threshold: f64) {
        let slot = match model {
            ModelId::MQ => &mut self.mq,
            ModelId::MA => &mut self.ma,
            ModelId::M1 => &mut self.m1,
            ModelId::M2 => &mut self.m2,
            ModelId::M3 => &mut self.m3,
        };
        *slot = threshold;
    }

    pub fn is_valid(&self) -> bool {
        ModelId::ALL
            .iter()
            .all(|&m| unit_interval(self.get(m)))
    }
}

fn unit_interval(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

/// Binary classifier decision with its score for class 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassifierOutput {
    label: u8,
    score: f64,
}

impl ClassifierOutput {
    /// Label derived from the threshold rule `score >= threshold`.
    pub fn from_score(score: f64, threshold: f64) -> Result<Self, BackendError> {
        if !unit_interval(score) {
            return Err(BackendError::InvalidOutput(format!(
                "score {score} outside [0, 1]"
            )));
        }
        Ok(ClassifierOutput {
            label: u8::from(score >= threshold),
            score,
        })
    }

    /// Accept an explicit label only if it agrees with the threshold rule.
    pub fn new(label: u8, score: f64, threshold: f64) -> Result<Self, BackendError> {
        if label > 1 {
            return Err(BackendError::InvalidOutput(format!("label {label} is not 0 or 1")));
        }
        let out = ClassifierOutput::from_score(score, threshold)?;
        if out.label != label {
            return Err(BackendError::InvalidOutput(format!(
                "label {label} disagrees with score {score} at threshold {threshold}"
            )));
        }
        Ok(out)
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn positive(&self) -> bool {
        self.label == 1
    }
}

/// Wire form of a classifier reply; the label is optional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub score: f64,
}

impl ClassifierReply {
    pub fn normalize(self, threshold: f64) -> Result<ClassifierOutput, BackendError> {
        match self.label {
            Some(label) => ClassifierOutput::new(label, self.score, threshold),
            None => ClassifierOutput::from_score(self.score, threshold),
        }
    }
}

impl From<ClassifierOutput> for ClassifierReply {
    fn from(out: ClassifierOutput) -> Self {
        ClassifierReply {
            label: Some(out.label),
            score: out.score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub present: bool,
    pub score: f64,
    /// Pixel box `[x0, y0, x1, y1]` in standardised coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[u32; 4]>,
}

impl Detection {
    pub fn new(present: bool, score: f64) -> Self {
        Detection {
            present,
            score,
            bbox: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnatomyOutput {
    pub macula: Detection,
    pub optic_nerve: Detection,
}

impl AnatomyOutput {
    pub fn new(macula: Detection, optic_nerve: Detection) -> Self {
        AnatomyOutput {
            macula,
            optic_nerve,
        }
    }

    /// Scores in [0, 1]; anything flagged present must reach the threshold.
    pub fn validate(&self, threshold: f64) -> Result<(), BackendError> {
        for (name, d) in [("macula", &self.macula), ("optic_nerve", &self.optic_nerve)] {
            if !unit_interval(d.score) {
                return Err(BackendError::InvalidOutput(format!(
                    "{name} score {} outside [0, 1]",
                    d.score
                )));
            }
            if d.present && d.score < threshold {
                return Err(BackendError::InvalidOutput(format!(
                    "{name} flagged present with score {} below threshold {threshold}",
                    d.score
                )));
            }
        }
        Ok(())
    }
}

/// Validated output of any model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelOutput {
    Classifier(ClassifierOutput),
    Anatomy(AnatomyOutput),
}

/// Unvalidated output as it appears in a manifest file or wire reply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawOutput {
    Anatomy(AnatomyOutput),
    Classifier(ClassifierReply),
}

impl RawOutput {
    pub fn validate(self, model: ModelId, thresholds: &ModelThresholds) -> Result<ModelOutput, BackendError> {
        match (model, self) {
            (ModelId::MA, RawOutput::Anatomy(a)) => {
                a.validate(thresholds.ma)?;
                Ok(ModelOutput::Anatomy(a))
            }
            (m, RawOutput::Classifier(c)) if m.is_classifier() => {
                Ok(ModelOutput::Classifier(c.normalize(thresholds.get(m))?))
            }
            (m, _) => Err(BackendError::InvalidOutput(format!(
                "output shape does not match model {m}"
            ))),
        }
    }
}

impl From<ModelOutput> for RawOutput {
    fn from(out: ModelOutput) -> Self {
        match out {
            ModelOutput::Classifier(c) => RawOutput::Classifier(c.into()),
            ModelOutput::Anatomy(a) => RawOutput::Anatomy(a),
        }
    }
}

/// One record of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub model: ModelId,
    pub output: RawOutput,
}

/// Flat `image_id,model,label,score` record of a predictions file.
///
/// An MA row stands for both anatomy detections: `label` 1 means macula and
/// optic nerve were both found, and `score` applies to each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: String,
    pub model: ModelId,
    #[serde(default)]
    pub label: Option<u8>,
    pub score: f64,
}

impl PredictionRow {
    pub fn into_entry(self) -> ManifestEntry {
        let output = match self.model {
            ModelId::MA => {
                let d = Detection::new(self.label == Some(1), self.score);
                RawOutput::Anatomy(AnatomyOutput::new(d, d))
            }
            _ => RawOutput::Classifier(ClassifierReply {
                label: self.label,
                score: self.score,
            }),
        };
        ManifestEntry {
            image_id: self.image_id,
            model: self.model,
            output,
        }
    }

    /// Flatten a manifest entry. Anatomy outputs collapse to "both found"
    /// with the lower of the two scores.
    pub fn from_entry(entry: &ManifestEntry) -> Self {
        let (label, score) = match entry.output {
            RawOutput::Classifier(c) => (c.label, c.score),
            RawOutput::Anatomy(a) => (
                Some(u8::from(a.macula.present && a.optic_nerve.present)),
                a.macula.score.min(a.optic_nerve.score),
            ),
        };
        PredictionRow {
            image_id: entry.image_id.clone(),
            model: entry.model,
            label,
            score,
        }
    }
}

/// What a model sees: the image id, and the pixels when available.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub image_id: &'a str,
    pub image: Option<&'a StandardImage>,
}

impl<'a> ModelInput<'a> {
    pub fn id(image_id: &'a str) -> Self {
        ModelInput {
            image_id,
            image: None,
        }
    }
}

/// Source of model outputs. Implementations are shared across concurrent
/// screenings.
pub trait InferenceBackend: Send + Sync {
    /// Run one of MQ, M1, M2, M3.
    fn classify(&self, model: ModelId, input: ModelInput<'_>) -> Result<ClassifierOutput, BackendError>;

    /// Run MA.
    fn detect_anatomy(&self, input: ModelInput<'_>) -> Result<AnatomyOutput, BackendError>;
}

impl<B: InferenceBackend + ?Sized> InferenceBackend for &B {
    fn classify(&self, model: ModelId, input: ModelInput<'_>) -> Result<ClassifierOutput, BackendError> {
        (**self).classify(model, input)
    }

    fn detect_anatomy(&self, input: ModelInput<'_>) -> Result<AnatomyOutput, BackendError> {
        (**self).detect_anatomy(input)
    }
}

impl<B: InferenceBackend + ?Sized> InferenceBackend for Arc<B> {
    fn classify(&self, model: ModelId, input: ModelInput<'_>) -> Result<ClassifierOutput, BackendError> {
        (**self).classify(model, input)
    }

    fn detect_anatomy(&self, input: ModelInput<'_>) -> Result<AnatomyOutput, BackendError> {
        (**self).detect_anatomy(input)
    }
}

/// Validated lookup table from `(image_id, model)` to output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackendManifest {
    entries: BTreeMap<(String, ModelId), ModelOutput>,
}

impl BackendManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(
        entries: impl IntoIterator<Item = ManifestEntry>,
        thresholds: &ModelThresholds,
    ) -> Result<Self, BackendError> {
        let mut manifest = BackendManifest::new();
        for e in entries {
            manifest.insert(e, thresholds)?;
        }
        Ok(manifest)
    }

    pub fn insert(&mut self, entry: ManifestEntry, thresholds: &ModelThresholds) -> Result<(), BackendError> {
        let output = entry.output.validate(entry.model, thresholds)?;
        let key = (entry.image_id, entry.model);
        if self.entries.contains_key(&key) {
            return Err(BackendError::DuplicateKey {
                image_id: key.0,
                model: key.1,
            });
        }
        self.entries.insert(key, output);
        Ok(())
    }

    pub fn get(&self, image_id: &str, model: ModelId) -> Option<&ModelOutput> {
        self.entries.get(&(image_id.to_string(), model))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = ManifestEntry> + '_ {
        self.entries.iter().map(|((id, model), out)| ManifestEntry {
            image_id: id.clone(),
            model: *model,
            output: (*out).into(),
        })
    }

    pub fn image_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entries.keys().map(|(id, _)| id.as_str()).collect();
        ids.dedup();
        ids
    }
}

/// Deterministic backend answering from a manifest.
#[derive(Debug, Clone, Default)]
pub struct StubBackend {
    manifest: BackendManifest,
}

impl StubBackend {
    pub fn new(manifest: BackendManifest) -> Self {
        StubBackend { manifest }
    }

    pub fn manifest(&self) -> &BackendManifest {
        &self.manifest
    }

    fn lookup(&self, image_id: &str, model: ModelId) -> Result<&ModelOutput, BackendError> {
        self.manifest
            .get(image_id, model)
            .ok_or_else(|| BackendError::MissingPrediction {
                image_id: image_id.to_string(),
                model,
            })
    }
}

impl InferenceBackend for StubBackend {
    fn classify(&self, model: ModelId, input: ModelInput<'_>) -> Result<ClassifierOutput, BackendError> {
        if !model.is_classifier() {
            return Err(BackendError::UnsupportedModel(model));
        }
        match self.lookup(input.image_id, model)? {
            ModelOutput::Classifier(c) => Ok(*c),
            ModelOutput::Anatomy(_) => Err(BackendError::InvalidOutput(format!(
                "manifest holds an anatomy output for {model}"
            ))),
        }
    }

    fn detect_anatomy(&self, input: ModelInput<'_>) -> Result<AnatomyOutput, BackendError> {
        match self.lookup(input.image_id, ModelId::MA)? {
            ModelOutput::Anatomy(a) => Ok(*a),
            ModelOutput::Classifier(_) => Err(BackendError::InvalidOutput(
                "manifest holds a classifier output for MA".to_string(),
            )),
        }
    }
}
