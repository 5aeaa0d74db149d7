mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use viraal_service::api;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn app(dir: &std::path::Path, token: Option<&str>) -> Router {
    api::router(Arc::new(common::service(dir)), token.map(str::to_owned))
}

#[tokio::test(flavor = "multi_thread")]
async fn full_round_over_http() {
    let f = common::fixture();
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);

    let (code, status) = call(&app, "GET", "/status", None, None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(status["round"], Value::Null);
    assert_eq!(status["checkpoint"], "initial.json");
    let pool = status["pool_count"].as_u64().unwrap();
    let labeled = status["labeled_count"].as_u64().unwrap();
    assert_eq!(pool + labeled, common::TRAIN as u64);

    let (code, _) = call(&app, "GET", "/tasks?n=2", None, None).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = call(&app, "GET", "/metrics", None, None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);

    let (code, round) = call(&app, "POST", "/rounds", Some(json!({"criterion": "entropy-joint", "budget": 3})), None).await;
    assert_eq!(code, StatusCode::CREATED, "{round}");
    assert_eq!(round["number"], 1);
    assert_eq!(round["tasks"]["queued"], 3);
    let (code, _) = call(&app, "POST", "/rounds", Some(json!({"criterion": "entropy-joint", "budget": 3})), None).await;
    assert_eq!(code, StatusCode::CONFLICT);

    let (code, page) = call(&app, "GET", "/tasks?n=5", None, None).await;
    assert_eq!(code, StatusCode::OK);
    let tasks = page["tasks"].as_array().unwrap().clone();
    assert_eq!(tasks.len(), 3);
    let conf: Vec<f64> = tasks.iter().map(|t| t["confidence"]["conf_joint"].as_f64().unwrap()).collect();
    assert!(conf.windows(2).all(|w| w[0] <= w[1]));
    for t in &tasks {
        assert_eq!(t["status"], "assigned");
        assert_eq!(t["tokens"].as_array().unwrap().len(), t["suggestion"]["slots"].as_array().unwrap().len());
    }

    let (code, _) = call(&app, "POST", "/retrain", None, None).await;
    assert_eq!(code, StatusCode::CONFLICT);

    for t in &tasks {
        let id = t["id"].as_u64().unwrap() as usize;
        let gold = common::gold_label(f, id);
        let (code, ack) = call(&app, "POST", &format!("/tasks/{id}/label"), Some(serde_json::to_value(&gold).unwrap()), None).await;
        assert_eq!(code, StatusCode::OK, "{ack}");
        assert_eq!(ack["duplicate"], false);
        let (code, ack) = call(&app, "POST", &format!("/tasks/{id}/label"), Some(serde_json::to_value(&gold).unwrap()), None).await;
        assert_eq!(code, StatusCode::OK);
        assert_eq!(ack["duplicate"], true);
    }
    let (_, status) = call(&app, "GET", "/status", None, None).await;
    assert_eq!(status["pool_count"].as_u64().unwrap(), pool - 3);
    assert_eq!(status["round"]["complete"], true);

    let (code, job) = call(&app, "POST", "/retrain", None, None).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let id = job["id"].as_u64().unwrap();
    let mut state = job["state"].clone();
    for _ in 0..600 {
        if state != "running" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
        state = call(&app, "GET", &format!("/jobs/{id}"), None, None).await.1["state"].clone();
    }
    assert_eq!(state, "succeeded");
    let (code, metrics) = call(&app, "GET", "/metrics", None, None).await;
    assert_eq!(code, StatusCode::OK);
    assert!(metrics["intent_accuracy"].as_f64().is_some());
    let (_, status) = call(&app, "GET", "/status", None, None).await;
    assert_eq!(status["checkpoint"], "round-1.json");
    assert_eq!(status["labeled_count"].as_u64().unwrap(), labeled + 3);
    let (code, _) = call(&app, "GET", "/jobs/77", None, None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_carry_diagnostics() {
    let f = common::fixture();
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (code, _) = call(&app, "POST", "/rounds", Some(json!({"criterion": "entropy-joint", "budget": 2})), None).await;
    assert_eq!(code, StatusCode::CREATED);
    let (_, page) = call(&app, "GET", "/tasks?n=1", None, None).await;
    let id = page["tasks"][0]["id"].as_u64().unwrap() as usize;
    let tokens = f.gold[id].tokens().len();

    let (code, err) = call(&app, "POST", &format!("/tasks/{id}/label"), Some(json!({"intent": "", "slots": ["O"]})), None).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "validation");
    assert!(err["fields"]["intent"].is_string());
    if tokens != 1 {
        assert!(err["fields"]["slots"].as_str().unwrap().contains(&tokens.to_string()));
    }

    let (code, err) = call(&app, "POST", &format!("/tasks/{id}/label"), Some(json!({"intent": "x"})), None).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "bad_request");

    let (code, err) = call(&app, "POST", "/tasks/4242/label", Some(json!({"intent": "x", "slots": []})), None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "not_found");
    let (code, _) = call(&app, "POST", "/tasks/abc/skip", None, None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);

    let (code, ack) = call(&app, "POST", &format!("/tasks/{id}/skip"), None, None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(ack["status"], "skipped");

    let (code, _) = call(&app, "POST", "/rounds", Some(json!({"criterion": "sideways", "budget": 2})), None).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = call(&app, "GET", "/tasks?n=minus", None, None).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, page) = call(&app, "GET", "/tasks?n=0", None, None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(page["tasks"].as_array().unwrap().len(), 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn static_token() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), Some("s3cret"));
    let (code, err) = call(&app, "GET", "/status", None, None).await;
    assert_eq!(code, StatusCode::UNAUTHORIZED);
    assert_eq!(err["error"], "unauthorized");
    let (code, _) = call(&app, "GET", "/status", None, Some("wrong")).await;
    assert_eq!(code, StatusCode::UNAUTHORIZED);
    let (code, _) = call(&app, "GET", "/status", None, Some("s3cret")).await;
    assert_eq!(code, StatusCode::OK);
}
