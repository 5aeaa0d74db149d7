//! HTTP routes. Bodies are JSON; errors are `{"error": kind, "message": ..., "fields": {...}}`.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::error::ServiceError;
use crate::service::{LabelRequest, OpenRound, Service};
use crate::now_ms;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Core(_) | ServiceError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = match &self {
            ServiceError::Validation(fields) => json!({"error": kind, "message": "invalid label", "fields": fields}),
            other => json!({"error": kind, "message": other.to_string()}),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

#[derive(Clone)]
struct AppState {
    service: Arc<Service>,
    token: Option<Arc<str>>,
}

/// Routes over `service`. With a token set, every request must carry
/// `Authorization: Bearer <token>`.
pub fn router(service: Arc<Service>, token: Option<String>) -> Router {
    let state = AppState {
        service,
        token: token.map(Into::into),
    };
    Router::new()
        .route("/status", get(status))
        .route("/rounds", post(open_round))
        .route("/tasks", get(next_tasks))
        .route("/tasks/{id}/label", post(label))
        .route("/tasks/{id}/skip", post(skip))
        .route("/retrain", post(retrain))
        .route("/jobs/{id}", get(job))
        .route("/metrics", get(metrics))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token) {
            return (StatusCode::UNAUTHORIZED, Json(json!({"error": "unauthorized", "message": "missing or wrong token"}))).into_response();
        }
    }
    next.run(req).await
}

/// Run a writer operation off the async workers.
async fn blocking<T: Send + 'static>(
    service: &Arc<Service>,
    f: impl FnOnce(&Service) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let svc = service.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ServiceError::Storage(format!("worker panicked: {e}")))?
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

fn task_id(path: Result<Path<usize>, PathRejection>) -> ApiResult<usize> {
    path.map(|Path(id)| id).map_err(|e| ServiceError::NotFound(e.body_text()))
}

async fn status(State(app): State<AppState>) -> impl IntoResponse {
    Json(app.service.status())
}

async fn open_round(State(app): State<AppState>, payload: Result<Json<OpenRound>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let req = body(payload)?;
    let view = blocking(&app.service, move |s| s.open_round(&req, now_ms())).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

#[derive(Deserialize)]
struct TasksQuery {
    n: Option<usize>,
}

async fn next_tasks(State(app): State<AppState>, query: Result<Query<TasksQuery>, QueryRejection>) -> ApiResult<impl IntoResponse> {
    let n = query
        .map_err(|e| ServiceError::BadRequest(e.body_text()))?
        .0
        .n
        .unwrap_or(1);
    let tasks = blocking(&app.service, move |s| s.next_tasks(n, now_ms())).await?;
    let round = app.service.status().round.map(|r| r.round.number);
    Ok(Json(json!({"round": round, "tasks": tasks})))
}

async fn label(
    State(app): State<AppState>,
    path: Result<Path<usize>, PathRejection>,
    payload: Result<Json<LabelRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let id = task_id(path)?;
    let req = body(payload)?;
    let ack = blocking(&app.service, move |s| s.submit_label(id, &req, now_ms())).await?;
    Ok(Json(ack))
}

async fn skip(State(app): State<AppState>, path: Result<Path<usize>, PathRejection>) -> ApiResult<impl IntoResponse> {
    let id = task_id(path)?;
    let ack = blocking(&app.service, move |s| s.skip(id, now_ms())).await?;
    Ok(Json(ack))
}

async fn retrain(State(app): State<AppState>) -> ApiResult<impl IntoResponse> {
    let ticket = blocking(&app.service, |s| s.start_retrain(now_ms())).await?;
    let job = ticket.job.clone();
    let svc = app.service.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = svc.run_retrain(ticket, now_ms) {
            log::error!("could not record retrain outcome: {e}");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn job(State(app): State<AppState>, path: Result<Path<u64>, PathRejection>) -> ApiResult<impl IntoResponse> {
    let id = path.map(|Path(id)| id).map_err(|e| ServiceError::NotFound(e.body_text()))?;
    app.service
        .job(id)
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("no job {id}")))
}

async fn metrics(State(app): State<AppState>) -> ApiResult<impl IntoResponse> {
    app.service
        .metrics()
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound("no retrained model has been evaluated yet".into()))
}
