use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body, BodyDataStream};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use bimflow_cli::server::{router, AppState};
use bimflow_core::align::providers::StubTranslator;
use bimflow_core::live::Engine;
use bimflow_core::model::checkpoint::Checkpoint;
use bimflow_core::model::train::TrainConfig;
use bimflow_core::model::ModelConfig;
use bimflow_core::pipeline::Bundle;
use bimflow_core::synthetic::{grammar_service, GrammarConfig};
use bimflow_core::{CoreError, VocabItem};
use futures::StreamExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn trained() -> &'static (Checkpoint, Bundle) {
    static CELL: OnceLock<(Checkpoint, Bundle)> = OnceLock::new();
    CELL.get_or_init(|| {
        let grammar = GrammarConfig { sessions: 600, ..Default::default() };
        let model = ModelConfig { dim: 16, heads: 2, layers: 1, ..Default::default() };
        let tc = TrainConfig { epochs: 2, batch: 32, lr: 3e-3, ..Default::default() };
        grammar_service(&grammar, model, &tc).unwrap()
    })
}

fn app() -> Router {
    let (c, b) = trained().clone();
    router(AppState::new(Engine::new(c, b, Box::new(StubTranslator)).unwrap()))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn new_session(app: &Router) -> String {
    let (status, v) = call(app, Method::POST, "/v1/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    v["session_id"].as_str().unwrap().to_string()
}

fn event(ms: i64, prefix: &str, message: &str) -> Value {
    let ts = chrono::DateTime::from_timestamp_millis(1_714_986_000_000 + ms).unwrap();
    let category = match prefix {
        "Menu" => "Menu",
        "Undo Event" | "Redo Event" => "Undo",
        _ => "Tool",
    };
    json!({ "ts": ts.to_rfc3339(), "category": category, "prefix": prefix, "message": message })
}

#[tokio::test]
async fn health_and_vocabulary_agree_with_the_checkpoint() {
    let app = app();
    let (status, h) = call(&app, Method::GET, "/v1/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(h["status"], "ready");
    let hash = trained().0.vocabulary.hash();
    assert_eq!(h["vocabulary_hash"], hash.as_str());
    assert_eq!(h["version"], trained().0.version().as_str());

    let (status, v) = call(&app, Method::GET, "/v1/vocabulary", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["hash"], hash.as_str());
    let items = v["items"].as_array().unwrap();
    assert_eq!(items.len(), trained().0.vocabulary.len());
    for (i, it) in items.iter().enumerate() {
        assert_eq!(it["id"], i);
    }
}

#[tokio::test]
async fn events_undo_and_recommendations() {
    let app = app();
    let id = new_session(&app).await;
    let uri = format!("/v1/sessions/{id}");

    let (status, _) = call(&app, Method::GET, &format!("{uri}/recommendations"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, d) = call(&app, Method::POST, &format!("{uri}/events"), Some(event(0, "Tool", "cmd03"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(d["length"], 1);
    assert_eq!(d["added"][0]["name"], "cmd03");

    let (_, d) = call(&app, Method::POST, &format!("{uri}/events"), Some(event(900, "Tool", "cmd07"))).await;
    assert_eq!(d["length"], 2);
    let (_, d) = call(&app, Method::POST, &format!("{uri}/events"), Some(event(2000, "Undo Event", "cmd07"))).await;
    assert_eq!(d["length"], 1);
    assert_eq!(d["removed"][0]["name"], "cmd07");
    assert!(d["added"].as_array().unwrap().is_empty());

    let (status, s) = call(&app, Method::GET, &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["events"], 3);
    assert_eq!(s["steps"].as_array().unwrap().len(), 1);

    let (status, r) = call(&app, Method::GET, &format!("{uri}/recommendations?k=5"), None).await;
    assert_eq!(status, StatusCode::OK);
    let items = r["items"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    let p: Vec<f64> = items.iter().map(|it| it["probability"].as_f64().unwrap()).collect();
    assert!(p.windows(2).all(|w| w[0] >= w[1]), "{p:?}");
    assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert_eq!(r["version"], trained().0.version().as_str());

    let (_, r) = call(&app, Method::GET, &format!("{uri}/recommendations"), None).await;
    assert_eq!(r["items"].as_array().unwrap().len(), 10);
}

#[tokio::test]
async fn error_statuses() {
    let app = app();
    let (status, _) = call(&app, Method::GET, "/v1/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::POST, "/v1/sessions/nope/events", Some(event(0, "Tool", "cmd01"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, "/v1/sessions/nope/recommendations", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let id = new_session(&app).await;
    let bad = json!({ "ts": "yesterday", "category": "Tool", "prefix": "Nonsense", "message": " " });
    let (status, v) = call(&app, Method::POST, &format!("/v1/sessions/{id}/events"), Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let fields: Vec<&str> = v["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["ts", "prefix", "message"]);
    let (_, s) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(s["events"], 0);
}

/// Reads one server-sent event and parses its data line.
async fn next_event(body: &mut BodyDataStream) -> Value {
    let mut buf = String::new();
    while !buf.contains("\n\n") {
        let chunk = body.next().await.unwrap().unwrap();
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
    }
    assert!(buf.starts_with("event: recommendations\n"), "{buf}");
    let data = buf.lines().find_map(|l| l.strip_prefix("data: ")).unwrap();
    serde_json::from_str(data).unwrap()
}

#[tokio::test]
async fn stream_pushes_recommendations_after_each_event() {
    let app = app();
    let id = new_session(&app).await;
    call(&app, Method::POST, &format!("/v1/sessions/{id}/events"), Some(event(0, "Tool", "cmd05"))).await;

    let req = Request::get(format!("/v1/sessions/{id}/stream")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "text/event-stream");
    let mut body = resp.into_body().into_data_stream();

    let first = next_event(&mut body).await;
    assert_eq!(first["items"].as_array().unwrap().len(), 10);
    call(&app, Method::POST, &format!("/v1/sessions/{id}/events"), Some(event(700, "Tool", "cmd06"))).await;
    let second = next_event(&mut body).await;
    assert_eq!(second["items"].as_array().unwrap().len(), 10);
}

#[test]
fn engine_refuses_a_bundle_with_another_vocabulary() {
    let (c, mut b) = trained().clone();
    let n = b.vocabulary.len();
    let mut items: Vec<VocabItem> = b.vocabulary.items().to_vec();
    items.swap(0, n - 1);
    b.vocabulary = bimflow_core::Vocabulary::from_items(items).unwrap();
    match Engine::new(c, b, Box::new(StubTranslator)) {
        Err(CoreError::VocabularySkew { .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("skewed bundle accepted"),
    }
}

#[test]
fn expiry_drops_idle_sessions() {
    let (c, b) = trained().clone();
    let state = AppState::new(Engine::new(c, b, Box::new(StubTranslator)).unwrap());
    state.sessions.create(chrono::Utc::now() - chrono::Duration::minutes(45));
    state.sessions.create(chrono::Utc::now());
    assert_eq!(state.expire(chrono::Duration::minutes(30)), 1);
    assert_eq!(Arc::strong_count(&state), 1);
    assert_eq!(state.sessions.len(), 1);
}
