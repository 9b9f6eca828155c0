//! JSON-over-HTTP routes for the annotation service.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use iterchat_core::{IterChatRecord, StateGain};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::{ServeDir, ServeFile};

use super::store::{Store, StoreError};
use crate::jsonl::{parse_lines, to_jsonl_string};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: String,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        Self { status, error: error.to_string(), detail: detail.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.error, "detail": self.detail }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::Io { .. } | StoreError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            StoreError::BadRequest(_) => StatusCode::BAD_REQUEST,
            StoreError::UnknownTask(_) | StoreError::UnknownDataset(_) => StatusCode::NOT_FOUND,
            StoreError::DuplicateDataset(_) | StoreError::AlreadyDone | StoreError::NotLeased => StatusCode::CONFLICT,
        };
        let error = match &e {
            StoreError::UnknownTask(_) => "unknown task".to_string(),
            StoreError::UnknownDataset(_) => "unknown dataset".to_string(),
            StoreError::BadRequest(_) => "bad request".to_string(),
            StoreError::Io { .. } | StoreError::Corrupt { .. } => "journal error".to_string(),
            other => other.to_string(),
        };
        ApiError { status, error, detail: e.to_string() }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(e.status(), "invalid request body", e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Run a store call off the async workers; journal writes sync to disk.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", e.to_string()))
}

#[derive(Deserialize)]
struct LeaseRequest {
    annotator_id: String,
}

#[derive(Deserialize)]
struct SubmitRequest {
    annotator_id: String,
    state_gain: StateGain,
    #[serde(default)]
    started_at: Option<DateTime<Utc>>,
}

#[derive(Deserialize)]
struct StatsQuery {
    annotator_id: Option<String>,
}

#[derive(Deserialize)]
struct UploadQuery {
    dataset_id: Option<String>,
}

async fn get_schema(State(store): State<Arc<Store>>) -> Response {
    Json(store.schema().clone()).into_response()
}

async fn list_datasets(State(store): State<Arc<Store>>) -> Response {
    Json(store.datasets()).into_response()
}

async fn upload_dataset(
    State(store): State<Arc<Store>>,
    Query(query): Query<UploadQuery>,
    body: String,
) -> ApiResult<Response> {
    let records: Vec<IterChatRecord> = parse_lines(body.as_bytes(), "upload")
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid JSONL", e.to_string()))?;
    let (dataset_id, task_count) = blocking(move || store.create_dataset(records, query.dataset_id)).await??;
    Ok((StatusCode::CREATED, Json(json!({ "dataset_id": dataset_id, "task_count": task_count }))).into_response())
}

async fn lease(
    State(store): State<Arc<Store>>,
    body: Result<Json<LeaseRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let task = blocking(move || store.lease_next(&req.annotator_id)).await??;
    Ok(Json(json!({ "task": task })).into_response())
}

async fn get_task(State(store): State<Arc<Store>>, Path(task_id): Path<String>) -> ApiResult<Response> {
    let task = store.task(&task_id).ok_or(StoreError::UnknownTask(task_id))?;
    Ok(Json(task).into_response())
}

async fn submit(
    State(store): State<Arc<Store>>,
    Path(task_id): Path<String>,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let outcome = blocking(move || store.submit(&task_id, &req.annotator_id, req.state_gain, req.started_at)).await??;
    let status = if outcome.accepted { StatusCode::OK } else { StatusCode::UNPROCESSABLE_ENTITY };
    Ok((status, Json(outcome)).into_response())
}

async fn stats(State(store): State<Arc<Store>>, Query(query): Query<StatsQuery>) -> Response {
    let filter = query.annotator_id.filter(|a| !a.is_empty());
    Json(store.stats(filter.as_deref())).into_response()
}

async fn export(State(store): State<Arc<Store>>, Path(dataset_id): Path<String>) -> ApiResult<Response> {
    let records = store.export(&dataset_id)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], to_jsonl_string(&records)).into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not found", "no such route")
}

/// All API routes, plus the static UI bundle when `ui_dir` is given.
pub fn router(store: Arc<Store>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/schema", get(get_schema))
        .route("/api/datasets", get(list_datasets).post(upload_dataset))
        .route("/api/tasks/lease", post(lease))
        .route("/api/tasks/{task_id}", get(get_task))
        .route("/api/tasks/{task_id}/submit", post(submit))
        .route("/api/stats", get(stats))
        .route("/api/export/{dataset_id}", get(export))
        .route("/api/{*rest}", get(not_found).post(not_found))
        .with_state(store);
    match ui_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            api.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => api.fallback(not_found),
    }
}
