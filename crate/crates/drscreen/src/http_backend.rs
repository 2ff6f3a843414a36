//! Inference over HTTP: one `POST {base}/v1/infer` per image and model.
//!
//! Request: `{"model": "M1", "image_id": "...", "image_png_base64": "..."}`.
//! Reply: `{"label": 0|1, "score": f}` for classifiers (label optional) or
//! `{"macula": {...}, "optic_nerve": {...}}` for MA. Replies are validated
//! exactly like manifest entries.
//!
//! The client is blocking. In async code, call it from `spawn_blocking` and
//! create and drop it outside the runtime.

use std::time::Duration;

use base64::Engine as _;
use drscreen_core::inference::{
    AnatomyOutput, BackendError, ClassifierOutput, InferenceBackend, ModelId, ModelInput, ModelOutput, ModelThresholds,
    RawOutput,
};
use drscreen_core::preprocess::STANDARD_SIZE;
use serde::Serialize;

use crate::io::encode_png;

#[derive(Debug, Serialize)]
pub struct InferRequest<'a> {
    pub model: ModelId,
    pub image_id: &'a str,
    /// Empty when the screening runs on image ids only.
    pub image_png_base64: String,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    thresholds: ModelThresholds,
}

impl HttpBackend {
    pub fn new(base_url: &str, thresholds: ModelThresholds, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        Ok(HttpBackend {
            client,
            url: format!("{}/v1/infer", base_url.trim_end_matches('/')),
            thresholds,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn infer(&self, model: ModelId, input: ModelInput<'_>) -> Result<ModelOutput, BackendError> {
        let image_png_base64 = match input.image {
            Some(img) => {
                let png = encode_png(STANDARD_SIZE, STANDARD_SIZE, img.data())
                    .map_err(|e| BackendError::InvalidOutput(e.to_string()))?;
                base64::engine::general_purpose::STANDARD.encode(png)
            }
            None => String::new(),
        };
        let body = InferRequest {
            model,
            image_id: input.image_id,
            image_png_base64,
        };
        let reply = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| BackendError::BackendUnavailable(format!("{}: {e}", self.url)))?;
        let status = reply.status();
        if !status.is_success() {
            return Err(BackendError::BackendUnavailable(format!("{} answered {status}", self.url)));
        }
        let text = reply
            .text()
            .map_err(|e| BackendError::BackendUnavailable(format!("{}: {e}", self.url)))?;
        let raw: RawOutput = serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidOutput(format!("malformed reply for {model}: {e}")))?;
        raw.validate(model, &self.thresholds)
    }
}

impl InferenceBackend for HttpBackend {
    fn classify(&self, model: ModelId, input: ModelInput<'_>) -> Result<ClassifierOutput, BackendError> {
        if !model.is_classifier() {
            return Err(BackendError::UnsupportedModel(model));
        }
        match self.infer(model, input)? {
            ModelOutput::Classifier(c) => Ok(c),
            ModelOutput::Anatomy(_) => Err(BackendError::InvalidOutput(format!("anatomy reply for {model}"))),
        }
    }

    fn detect_anatomy(&self, input: ModelInput<'_>) -> Result<AnatomyOutput, BackendError> {
        match self.infer(ModelId::MA, input)? {
            ModelOutput::Anatomy(a) => Ok(a),
            ModelOutput::Classifier(_) => Err(BackendError::InvalidOutput("classifier reply for MA".to_string())),
        }
    }
}
