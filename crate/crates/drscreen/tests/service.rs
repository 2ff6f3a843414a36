mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use drscreen::service::{router, AppState, Dataset, ServiceConfig, FIXTURE_DATASET};
use drscreen::store::Store;
use drscreen_core::inference::StubBackend;
use drscreen_core::reference::TABLE4_PROPOSED_RDR;
use drscreen_core::workflow::{
    begin_screening, ScreeningInput, ScreeningPolicy, ScreeningStep, Stage, StageOutput,
};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn state_with(store: Store, token: Option<&str>) -> Arc<AppState> {
    let config = ServiceConfig {
        token: token.map(str::to_string),
        ..ServiceConfig::default()
    };
    let fixture = Dataset::table4_fixture(&config.policy).unwrap();
    Arc::new(
        AppState::new(Arc::new(StubBackend::new(common::demo_manifest())), config, store)
            .with_dataset(FIXTURE_DATASET, fixture),
    )
}

fn app() -> Router {
    router(state_with(Store::in_memory(), None))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, body)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    };
    send(app, req.unwrap()).await
}

async fn new_study(app: &Router) -> String {
    let (status, body) = call(app, "POST", "/v1/studies", None).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["study_id"].as_str().unwrap().to_string()
}

fn upload(image_id: &str, png: &[u8]) -> Value {
    json!({
        "image_id": image_id,
        "image_base64": base64::engine::general_purpose::STANDARD.encode(png),
    })
}

async fn submit(app: &Router, study: &str, image_id: &str) -> (StatusCode, Value) {
    let png = common::fundus_png(160, 120);
    call(app, "POST", &format!("/v1/studies/{study}/images"), Some(upload(image_id, &png))).await
}

#[tokio::test]
async fn health_is_open() {
    let (status, body) = call(&app(), "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn studies_get_distinct_ids_and_start_empty() {
    let app = app();
    let a = new_study(&app).await;
    let b = new_study(&app).await;
    assert_ne!(a, b);
    let (status, body) = call(&app, "GET", &format!("/v1/studies/{a}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "open");
    assert_eq!(body["images"].as_array().unwrap().len(), 0);

    let (status, body) = call(&app, "GET", "/v1/studies/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_study");
}

#[tokio::test]
async fn happy_path_reports_every_stage() {
    let app = app();
    let study = new_study(&app).await;
    let (status, body) = submit(&app, &study, "good").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["status"], "complete");
    let trace = body["result"]["trace"].as_array().unwrap();
    let stages: Vec<&str> = trace.iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["quality", "anatomy", "M1", "M2"]);
    // Preprocessing is the fifth stage on the image's path.
    assert!(body["preprocess"]["region"].is_object());
    assert_eq!(trace.len() + 1, 5);
    assert_eq!(body["result"]["disposition"], "review_12_months");
    assert_eq!(trace[2]["output"]["label"], 0);
    assert_eq!(trace[2]["output"]["score"], 0.1);

    let (_, results) = call(&app, "GET", &format!("/v1/studies/{study}/results"), None).await;
    assert_eq!(results["images"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn corrupt_bytes_are_rejected_and_not_stored() {
    let app = app();
    let study = new_study(&app).await;
    let (status, body) = call(
        &app,
        "POST",
        &format!("/v1/studies/{study}/images"),
        Some(upload("good", b"definitely not a png")),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "decode_error");
    assert!(body["detail"].as_str().unwrap().len() > 3);
    let (_, s) = call(&app, "GET", &format!("/v1/studies/{study}"), None).await;
    assert_eq!(s["images"].as_array().unwrap().len(), 0);

    // A blank frame decodes but holds no fundus.
    let blank = drscreen::io::encode_png(100, 100, &vec![0; 100 * 100 * 3]).unwrap();
    let (status, body) =
        call(&app, "POST", &format!("/v1/studies/{study}/images"), Some(upload("good", &blank))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "no_fundus_detected");
}

#[tokio::test]
async fn low_quality_waits_for_the_md_then_retakes() {
    let app = app();
    let study = new_study(&app).await;
    let (status, body) = submit(&app, &study, "blurry").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "awaiting_md_decision");
    assert_eq!(body["pending"]["reason"], "low_quality");

    // Cannot resubmit while the decision is outstanding.
    let (status, body) = submit(&app, &study, "blurry").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "awaiting_md_decision");

    let uri = format!("/v1/studies/{study}/images/blurry/md-decision");
    let (status, body) = call(&app, "POST", &uri, Some(json!({"decision": "retake"}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["status"], "complete");
    assert_eq!(body["result"]["disposition"], "retake");

    // The prompt is answered at most once.
    let (status, body) = call(&app, "POST", &uri, Some(json!({"decision": "proceed_ungradable"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "no_pending_decision");

    // The retaken image comes back as attempt 1.
    let (status, body) = submit(&app, &study, "blurry").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["pending"]["attempt"], 1);
    let (_, body) = call(&app, "POST", &uri, Some(json!({"decision": "proceed_ungradable"}))).await;
    assert_eq!(body["result"]["disposition"], "refer_ungradable");

    let (_, results) = call(&app, "GET", &format!("/v1/studies/{study}/results"), None).await;
    let img = &results["images"][0];
    assert_eq!(img["retaken"].as_array().unwrap().len(), 1);
    assert_eq!(img["state"]["result"]["attempt"], 1);

    let (status, body) = call(&app, "POST", &uri, Some(json!({"decision": "maybe"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
}

#[tokio::test]
async fn duplicate_and_closed_and_backend_errors() {
    let app = app();
    let study = new_study(&app).await;
    assert_eq!(submit(&app, &study, "good").await.0, StatusCode::OK);
    let (status, body) = submit(&app, &study, "good").await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("duplicate_image")));

    // No manifest entry: the stage is named in the detail.
    let (status, body) = submit(&app, &study, "unknown").await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["error"], "backend_error");
    assert!(body["detail"].as_str().unwrap().starts_with("MQ failed"), "{body}");

    let (status, body) = call(&app, "POST", &format!("/v1/studies/{study}/close"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "closed");
    let (status, body) = submit(&app, &study, "r3").await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("study_closed")));
}

#[tokio::test]
async fn multipart_upload() {
    let app = app();
    let study = new_study(&app).await;
    let png = common::fundus_png(200, 150);
    let boundary = "XBOUNDARYX";
    let mut body = Vec::new();
    body.extend_from_slice(
        format!("--{boundary}\r\nContent-Disposition: form-data; name=\"image_id\"\r\n\r\nr3\r\n").as_bytes(),
    );
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"r3.png\"\r\nContent-Type: image/png\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(&png);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let req = Request::post(format!("/v1/studies/{study}/images"))
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    let (status, body) = send(&app, req).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["result"]["disposition"], "refer_specialist");
    assert_eq!(body["result"]["grade"], "R3");
}

#[tokio::test]
async fn feedback_is_append_only() {
    let app = app();
    let study = new_study(&app).await;
    let (_, screened) = submit(&app, &study, "r3").await;
    let fb = |reviewer: &str| {
        json!({
            "study_id": study,
            "image_id": "r3",
            "reviewer": reviewer,
            "suggested_quality": "gradable",
            "suggested_grade": "R2",
            "note": "looks moderate",
            "timestamp": "2024-05-01T10:00:00Z",
        })
    };
    let (status, first) = call(&app, "POST", "/v1/feedback", Some(fb("alice"))).await;
    assert_eq!(status, StatusCode::CREATED, "{first}");
    let (status, second) = call(&app, "POST", "/v1/feedback", Some(fb("bob"))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_ne!(first["feedback_id"], second["feedback_id"]);

    let (_, list) = call(&app, "GET", &format!("/v1/feedback?study_id={study}&image_id=r3"), None).await;
    assert_eq!(list.as_array().unwrap().len(), 2);
    assert_eq!(list[0]["suggested_grade"], "R2");

    // The system's answer is untouched.
    let (_, results) = call(&app, "GET", &format!("/v1/studies/{study}/results"), None).await;
    assert_eq!(results["images"][0]["state"]["result"], screened["result"]);
    assert_eq!(results["images"][0]["state"]["result"]["grade"], "R3");

    let mut unknown = fb("carol");
    unknown["image_id"] = json!("nope");
    let (status, body) = call(&app, "POST", "/v1/feedback", Some(unknown)).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_image")));

    let mut bad = fb("dave");
    bad["suggested_grade"] = json!("R9");
    assert_eq!(call(&app, "POST", "/v1/feedback", Some(bad)).await.0, StatusCode::BAD_REQUEST);

    // There is no route that edits or deletes.
    let (status, _) = call(&app, "DELETE", "/v1/feedback", None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
}

#[tokio::test]
async fn evaluation_report_on_the_fixture() {
    let app = app();
    let (status, body) = call(&app, "GET", "/v1/reports/evaluation?scenario=experiment-1", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let cm = &body["metrics"]["confusion"];
    let want = TABLE4_PROPOSED_RDR;
    assert_eq!(
        (cm["tn"].as_u64(), cm["fp"].as_u64(), cm["fn"].as_u64(), cm["tp"].as_u64()),
        (Some(want.tn), Some(want.fp), Some(want.fn_), Some(want.tp))
    );
    let p = &body["metrics"]["percentages"];
    assert_eq!(
        [&p["f1_negative"], &p["sensitivity"], &p["specificity"], &p["ppv"], &p["npv"], &p["accuracy"]],
        [98, 91, 96, 64, 99, 96]
    );

    let (_, again) = call(&app, "GET", "/v1/reports/evaluation?scenario=experiment-1", None).await;
    assert_eq!(again, body);

    let (status, body) = call(&app, "GET", "/v1/reports/evaluation?scenario=experiment-7", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["fairness"]["feature"], "sex");
    assert_eq!(body["fairness"]["type"], "Per Patient");
    assert_eq!(body["groups"].as_array().unwrap().len(), 2);

    let (status, body) = call(&app, "GET", "/v1/reports/evaluation?scenario=age%3D%3C18", None).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("empty_input")));

    let (status, _) = call(&app, "GET", "/v1/reports/evaluation?scenario=bogus", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/v1/reports/evaluation?dataset=other", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, rows) = call(&app, "GET", "/v1/reports/reproduce", None).await;
    assert_eq!(rows.as_array().unwrap().len(), 8);
    assert!(rows.as_array().unwrap().iter().all(|r| r["mismatches"].as_array().unwrap().is_empty()));
}

#[tokio::test]
async fn bearer_token_guards_everything_but_health() {
    let app = router(state_with(Store::in_memory(), Some("s3cret")));
    assert_eq!(call(&app, "GET", "/v1/health", None).await.0, StatusCode::OK);
    let (status, body) = call(&app, "POST", "/v1/studies", None).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::UNAUTHORIZED, Some("unauthorized")));
    let req = Request::post("/v1/studies")
        .header(header::AUTHORIZATION, "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::CREATED);
}

#[tokio::test]
async fn studies_survive_a_restart_and_replay_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let study;
    {
        let state = state_with(Store::open(dir.path()).unwrap(), None);
        let app = router(state.clone());
        study = new_study(&app).await;
        submit(&app, &study, "good").await;
        submit(&app, &study, "r3").await;
        submit(&app, &study, "blurry").await;
        let uri = format!("/v1/studies/{study}/images/blurry/md-decision");
        call(&app, "POST", &uri, Some(json!({"decision": "proceed_ungradable"}))).await;
        state.flush().unwrap();
    }
    let app = router(state_with(Store::open(dir.path()).unwrap(), None));
    let (status, body) = call(&app, "GET", &format!("/v1/studies/{study}/results"), None).await;
    assert_eq!(status, StatusCode::OK);
    let images = body["images"].as_array().unwrap();
    assert_eq!(images.len(), 3);

    // Every stored result follows from its inputs and the stub manifest.
    let backend = StubBackend::new(common::demo_manifest());
    let policy = ScreeningPolicy::default();
    for img in images {
        let stored: drscreen_core::workflow::ScreeningResult =
            serde_json::from_value(img["state"]["result"].clone()).unwrap();
        let input = ScreeningInput {
            image_id: &stored.image_id,
            image: None,
            attempt: stored.attempt,
        };
        let replayed = match begin_screening(input, &backend, &policy).unwrap() {
            ScreeningStep::Complete(r) => r,
            ScreeningStep::AwaitingMd(p) => {
                let decision = stored
                    .stage(Stage::MdGate)
                    .and_then(|s| match s.output {
                        StageOutput::Md { decision, .. } => Some(decision),
                        _ => None,
                    })
                    .expect("gate decision recorded");
                p.resolve(decision, &policy)
            }
        };
        assert_eq!(replayed, stored);
    }
}

#[tokio::test]
async fn concurrent_submissions_to_one_study_are_serialised() {
    let app = app();
    let study = new_study(&app).await;
    let mut tasks = Vec::new();
    for _ in 0..6 {
        let (app, study) = (app.clone(), study.clone());
        tasks.push(tokio::spawn(async move { submit(&app, &study, "good").await.0 }));
    }
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.unwrap());
    }
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::OK).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::CONFLICT).count(), 5);
}
