//! HTTP/JSON service: studies, two-step screening with the MD gate,
//! append-only reviewer feedback and evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use drscreen_core::aggregation::{screen_cohort, Predictions};
use drscreen_core::cohort::Cohort;
use drscreen_core::evaluation::{evaluate, EvaluationError};
use drscreen_core::fairness::{DiBounds, PairGroupSpec};
use drscreen_core::inference::{BackendError, BackendManifest, InferenceBackend, StubBackend};
use drscreen_core::preprocess::{preprocess, PreprocessConfig, Provenance};
use drscreen_core::reference::{reference_rows, table4_replay, ReplayError};
use drscreen_core::workflow::{
    begin_screening, MdDecision, PendingScreening, PresetMd, ScreeningInput, ScreeningPolicy, ScreeningResult,
    ScreeningStep, WorkflowError,
};
use drscreen_core::{Disposition, Grade};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::io::{decode_image, IoError};
use crate::report::{EvaluationJson, ReproducedRow};
use crate::store::{
    now_ms, Event, FeedbackEntry, ImageState, QualityVerdict, Store, StoreError, Study, StudyImage, StudyStatus,
};
use crate::select_scenario;

/// Built-in dataset: the replay cohort screened through its stub manifest.
pub const FIXTURE_DATASET: &str = "table4-fixture";

/// Largest accepted request body.
const BODY_LIMIT: usize = 64 * 1024 * 1024;

/// A cohort with predictions, ready for evaluation reports.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cohort: Cohort,
    pub predictions: Predictions,
}

impl Dataset {
    /// Screen every image through the manifest, resolving the MD gate as
    /// "proceed as ungradable" since no operator is present.
    pub fn screened(cohort: Cohort, manifest: BackendManifest, policy: &ScreeningPolicy) -> Result<Self, WorkflowError> {
        let backend = StubBackend::new(manifest);
        let (predictions, _) = screen_cohort(&cohort, &backend, policy, &mut PresetMd(MdDecision::ProceedUngradable))?;
        Ok(Dataset { cohort, predictions })
    }

    pub fn table4_fixture(policy: &ScreeningPolicy) -> Result<Self, ReplayError> {
        let (cohort, manifest) = table4_replay()?;
        Dataset::screened(cohort, manifest, policy).map_err(|e| match e {
            WorkflowError::Backend { source, .. } => ReplayError::Backend(source),
            WorkflowError::InvalidPolicy(m) => ReplayError::Backend(BackendError::InvalidOutput(m)),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub policy: ScreeningPolicy,
    pub preprocess: PreprocessConfig,
    pub bounds: DiBounds,
    /// Static bearer token; every route but health requires it when set.
    pub token: Option<String>,
}

pub struct AppState {
    backend: Arc<dyn InferenceBackend>,
    config: ServiceConfig,
    store: Mutex<Store>,
    study_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    datasets: BTreeMap<String, Dataset>,
}

impl AppState {
    pub fn new(backend: Arc<dyn InferenceBackend>, config: ServiceConfig, store: Store) -> Self {
        AppState {
            backend,
            config,
            store: Mutex::new(store),
            study_locks: Mutex::new(HashMap::new()),
            datasets: BTreeMap::new(),
        }
    }

    pub fn with_dataset(mut self, name: impl Into<String>, dataset: Dataset) -> Self {
        self.datasets.insert(name.into(), dataset);
        self
    }

    /// Persist everything now; called on shutdown.
    pub fn flush(&self) -> Result<(), StoreError> {
        self.store.lock().expect("store lock").flush()
    }

    fn study_lock(&self, study_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.study_locks.lock().expect("lock table");
        locks.entry(study_id.to_string()).or_default().clone()
    }

    fn study(&self, study_id: &str) -> Result<Study, ApiError> {
        self.store
            .lock()
            .expect("store lock")
            .state()
            .studies
            .get(study_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_study", format!("no study {study_id:?}")))
    }

    fn commit(&self, event: Event) -> Result<(), ApiError> {
        self.store.lock().expect("store lock").commit(event).map_err(ApiError::internal)
    }
}

/// `{"error": code, "detail": text}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            detail: detail.into(),
        }
    }

    fn bad_request(code: &'static str, detail: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, code, detail)
    }

    fn not_found(code: &'static str, detail: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, code, detail)
    }

    fn conflict(code: &'static str, detail: impl Into<String>) -> Self {
        ApiError::new(StatusCode::CONFLICT, code, detail)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "detail": self.detail }))).into_response()
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        match &e {
            WorkflowError::Backend {
                source: BackendError::BackendUnavailable(_),
                ..
            } => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable", e.to_string()),
            WorkflowError::Backend { .. } => ApiError::new(StatusCode::BAD_GATEWAY, "backend_error", e.to_string()),
            WorkflowError::InvalidPolicy(_) => ApiError::internal(e),
        }
    }
}

impl From<EvaluationError> for ApiError {
    fn from(e: EvaluationError) -> Self {
        let code = match e {
            EvaluationError::EmptyScenario(_) => "empty_input",
            EvaluationError::Aggregation(_) => "aggregation_error",
            EvaluationError::Metrics(_) => "metrics_error",
            EvaluationError::Fairness(_) => "fairness_error",
        };
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("invalid_body", e.to_string()))
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/v1/studies", post(create_study))
        .route("/v1/studies/{study_id}", get(get_study))
        .route("/v1/studies/{study_id}/close", post(close_study))
        .route("/v1/studies/{study_id}/images", post(submit_image))
        .route("/v1/studies/{study_id}/images/{image_id}/md-decision", post(md_decision))
        .route("/v1/studies/{study_id}/results", get(get_results))
        .route("/v1/feedback", post(submit_feedback).get(list_feedback))
        .route("/v1/reports/evaluation", get(evaluation_report))
        .route("/v1/reports/reproduce", get(reproduce_report))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/v1/health", get(health))
        .merge(api)
        .fallback(|| async { ApiError::not_found("not_found", "no such endpoint") })
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_study(State(state): State<Arc<AppState>>) -> Result<(StatusCode, Json<Study>), ApiError> {
    let study_id = uuid::Uuid::new_v4().to_string();
    state.commit(Event::StudyCreated {
        study_id: study_id.clone(),
        created_at_ms: now_ms(),
    })?;
    Ok((StatusCode::CREATED, Json(state.study(&study_id)?)))
}

async fn get_study(State(state): State<Arc<AppState>>, Path(study_id): Path<String>) -> Result<Json<Study>, ApiError> {
    state.study(&study_id).map(Json)
}

async fn close_study(State(state): State<Arc<AppState>>, Path(study_id): Path<String>) -> Result<Json<Study>, ApiError> {
    let lock = state.study_lock(&study_id);
    let _guard = lock.lock().await;
    let study = state.study(&study_id)?;
    if study.status == StudyStatus::Open {
        state.commit(Event::StudyClosed { study_id: study_id.clone() })?;
    }
    state.study(&study_id).map(Json)
}

#[derive(Debug, Serialize)]
struct ResultsReply {
    study_id: String,
    status: StudyStatus,
    images: Vec<StudyImage>,
}

async fn get_results(
    State(state): State<Arc<AppState>>,
    Path(study_id): Path<String>,
) -> Result<Json<ResultsReply>, ApiError> {
    let s = state.study(&study_id)?;
    Ok(Json(ResultsReply {
        study_id: s.study_id,
        status: s.status,
        images: s.images,
    }))
}

#[derive(Debug, Deserialize)]
struct ImageUpload {
    #[serde(default)]
    image_id: Option<String>,
    image_base64: String,
}

/// Image bytes and id from a JSON body or a multipart form with an
/// `image` file field and an optional `image_id` text field.
async fn read_upload(state: &Arc<AppState>, req: Request) -> Result<(Option<String>, Vec<u8>), ApiError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if is_multipart {
        let mut form = Multipart::from_request(req, state)
            .await
            .map_err(|e| ApiError::bad_request("invalid_body", e.body_text()))?;
        let (mut id, mut bytes) = (None, None);
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError::bad_request("invalid_body", e.body_text()))?
        {
            let name = field.name().unwrap_or_default().to_string();
            let data = field
                .bytes()
                .await
                .map_err(|e| ApiError::bad_request("invalid_body", e.body_text()))?;
            match name.as_str() {
                "image" => bytes = Some(data.to_vec()),
                "image_id" => id = Some(String::from_utf8_lossy(&data).trim().to_string()),
                _ => {}
            }
        }
        let bytes = bytes.ok_or_else(|| ApiError::bad_request("invalid_body", "multipart form has no image field"))?;
        Ok((id, bytes))
    } else {
        let body = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::bad_request("invalid_body", e.body_text()))?;
        let up: ImageUpload = parse_json(&body)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(up.image_base64.trim())
            .map_err(|e| ApiError::bad_request("decode_error", format!("image_base64: {e}")))?;
        Ok((up.image_id, bytes))
    }
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum ScreeningReply {
    Complete {
        study_id: String,
        image_id: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        preprocess: Option<Provenance>,
        result: ScreeningResult,
    },
    AwaitingMdDecision {
        study_id: String,
        image_id: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        preprocess: Option<Provenance>,
        pending: PendingScreening,
        options: [MdDecision; 2],
    },
}

fn reply_for(study_id: &str, img: &StudyImage) -> ScreeningReply {
    let preprocess = img.preprocess.clone();
    match &img.state {
        ImageState::Complete { result } => ScreeningReply::Complete {
            study_id: study_id.to_string(),
            image_id: result.image_id.clone(),
            preprocess,
            result: result.clone(),
        },
        ImageState::AwaitingMdDecision { pending } => ScreeningReply::AwaitingMdDecision {
            study_id: study_id.to_string(),
            image_id: pending.image_id.clone(),
            preprocess,
            pending: pending.clone(),
            options: [MdDecision::RetakeImage, MdDecision::ProceedUngradable],
        },
    }
}

fn open_study(state: &AppState, study_id: &str) -> Result<Study, ApiError> {
    let study = state.study(study_id)?;
    if study.status == StudyStatus::Closed {
        return Err(ApiError::conflict("study_closed", format!("study {study_id:?} is closed")));
    }
    Ok(study)
}

async fn submit_image(
    State(state): State<Arc<AppState>>,
    Path(study_id): Path<String>,
    req: Request,
) -> Result<Json<ScreeningReply>, ApiError> {
    let (image_id, bytes) = read_upload(&state, req).await?;
    let image_id = match image_id.filter(|s| !s.is_empty()) {
        Some(id) => id,
        None => uuid::Uuid::new_v4().to_string(),
    };
    let lock = state.study_lock(&study_id);
    let _guard = lock.lock().await;
    let study = open_study(&state, &study_id)?;

    // A known image may only come back after the operator asked for a retake.
    let attempt = match study.image(&image_id) {
        None => 0,
        Some(img) => match img.result() {
            Some(r) if r.disposition == Disposition::Retake => r.attempt + 1,
            Some(_) => {
                return Err(ApiError::conflict(
                    "duplicate_image",
                    format!("image {image_id:?} already screened in this study"),
                ))
            }
            None => {
                return Err(ApiError::conflict(
                    "awaiting_md_decision",
                    format!("image {image_id:?} is waiting for an MD decision"),
                ))
            }
        },
    };

    let worker = state.clone();
    let id = image_id.clone();
    let (step, provenance) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let raw = decode_image(&bytes).map_err(|e| ApiError::bad_request("decode_error", e.to_string()))?;
        let std_img = preprocess(&raw, &worker.config.preprocess, &id).map_err(|e| {
            let detail = format!("{id}: {e}");
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, IoError::from(e).code(), detail)
        })?;
        let input = ScreeningInput {
            image_id: &id,
            image: Some(&std_img),
            attempt,
        };
        let step = begin_screening(input, worker.backend.as_ref(), &worker.config.policy)?;
        Ok((step, std_img.provenance().clone()))
    })
    .await
    .map_err(ApiError::internal)??;

    let event = match step {
        ScreeningStep::Complete(result) => Event::ScreeningCompleted {
            study_id: study_id.clone(),
            result,
            preprocess: Some(provenance),
        },
        ScreeningStep::AwaitingMd(pending) => Event::ScreeningPending {
            study_id: study_id.clone(),
            pending,
            preprocess: Some(provenance),
        },
    };
    state.commit(event)?;
    let study = state.study(&study_id)?;
    let img = study.image(&image_id).expect("just stored");
    Ok(Json(reply_for(&study_id, img)))
}

#[derive(Debug, Deserialize)]
struct MdDecisionBody {
    decision: MdDecision,
}

async fn md_decision(
    State(state): State<Arc<AppState>>,
    Path((study_id, image_id)): Path<(String, String)>,
    body: Bytes,
) -> Result<Json<ScreeningReply>, ApiError> {
    let MdDecisionBody { decision } = parse_json(&body)?;
    let lock = state.study_lock(&study_id);
    let _guard = lock.lock().await;
    let study = open_study(&state, &study_id)?;
    let img = study
        .image(&image_id)
        .ok_or_else(|| ApiError::not_found("unknown_image", format!("no image {image_id:?} in study")))?;
    let ImageState::AwaitingMdDecision { pending } = &img.state else {
        return Err(ApiError::conflict(
            "no_pending_decision",
            format!("image {image_id:?} is not waiting for an MD decision"),
        ));
    };
    let result = pending.clone().resolve(decision, &state.config.policy);
    state.commit(Event::ScreeningCompleted {
        study_id: study_id.clone(),
        result,
        preprocess: None,
    })?;
    let study = state.study(&study_id)?;
    Ok(Json(reply_for(&study_id, study.image(&image_id).expect("stored"))))
}

#[derive(Debug, Deserialize)]
struct FeedbackBody {
    study_id: String,
    image_id: String,
    reviewer: String,
    #[serde(default)]
    suggested_quality: Option<QualityVerdict>,
    suggested_grade: Grade,
    #[serde(default)]
    note: String,
    #[serde(default)]
    timestamp: Option<String>,
}

async fn submit_feedback(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<FeedbackEntry>), ApiError> {
    let b: FeedbackBody = parse_json(&body)?;
    if b.reviewer.trim().is_empty() {
        return Err(ApiError::bad_request("invalid_body", "reviewer must not be empty"));
    }
    let entry = FeedbackEntry {
        feedback_id: uuid::Uuid::new_v4().to_string(),
        study_id: b.study_id,
        image_id: b.image_id,
        reviewer: b.reviewer,
        suggested_quality: b.suggested_quality,
        suggested_grade: b.suggested_grade,
        note: b.note,
        timestamp: b.timestamp,
        received_at_ms: now_ms(),
    };
    // Check and append under one lock so the append is atomic.
    let mut store = state.store.lock().expect("store lock");
    let known = store
        .state()
        .studies
        .get(&entry.study_id)
        .is_some_and(|s| s.image(&entry.image_id).is_some());
    if !known {
        return Err(ApiError::not_found(
            "unknown_image",
            format!("no image {:?} in study {:?}", entry.image_id, entry.study_id),
        ));
    }
    store
        .commit(Event::FeedbackAdded { entry: entry.clone() })
        .map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(entry)))
}

#[derive(Debug, Deserialize)]
struct FeedbackQuery {
    study_id: Option<String>,
    image_id: Option<String>,
}

async fn list_feedback(
    State(state): State<Arc<AppState>>,
    Query(q): Query<FeedbackQuery>,
) -> Json<Vec<FeedbackEntry>> {
    let store = state.store.lock().expect("store lock");
    let hits = store
        .state()
        .feedback
        .iter()
        .filter(|f| q.study_id.as_ref().is_none_or(|s| *s == f.study_id))
        .filter(|f| q.image_id.as_ref().is_none_or(|i| *i == f.image_id))
        .cloned()
        .collect();
    Json(hits)
}

#[derive(Debug, Deserialize)]
struct EvaluationQuery {
    scenario: Option<String>,
    dataset: Option<String>,
    attribute: Option<String>,
    unprivileged: Option<String>,
    privileged: Option<String>,
}

async fn evaluation_report(
    State(state): State<Arc<AppState>>,
    Query(q): Query<EvaluationQuery>,
) -> Result<Json<EvaluationJson>, ApiError> {
    let name = q.dataset.as_deref().unwrap_or(FIXTURE_DATASET);
    let data = state
        .datasets
        .get(name)
        .ok_or_else(|| ApiError::not_found("unknown_dataset", format!("no dataset {name:?}")))?;
    let (scenario, mut comparison) = select_scenario(q.scenario.as_deref().unwrap_or("experiment-1"))
        .map_err(|e| ApiError::bad_request("invalid_scenario", e))?;
    match (&q.attribute, &q.unprivileged, &q.privileged) {
        (Some(a), Some(u), Some(p)) => {
            comparison = Some(
                PairGroupSpec::parse(a, u, p).map_err(|e| ApiError::bad_request("invalid_group", e.to_string()))?,
            );
        }
        (None, None, None) => {}
        _ => {
            return Err(ApiError::bad_request(
                "invalid_group",
                "attribute, unprivileged and privileged go together",
            ))
        }
    }
    let ev = evaluate(
        &data.cohort,
        &data.predictions,
        &scenario,
        comparison.as_ref(),
        &state.config.bounds,
    )?;
    Ok(Json(EvaluationJson::from(&ev)))
}

async fn reproduce_report() -> Json<Vec<ReproducedRow>> {
    Json(reference_rows().iter().map(ReproducedRow::check).collect())
}

/// Serve until `shutdown` resolves, then flush the store.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), StoreError> {
    let app = router(state.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|source| StoreError::Io {
            path: "<listener>".into(),
            source,
        })?;
    state.flush()
}
