use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::store::{ComparisonSubmission, HighlightSubmission, Store, Task, TaskKind};

/// Optional header naming the caller; when present it must match the
/// annotator in the query or body.
pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

const INDEX_HTML: &str = include_str!("../static/index.html");

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        let status = match &e {
            ServiceError::UnknownAnnotator(_) | ServiceError::UnknownTask(_) | ServiceError::UnknownDialogue(_) => {
                StatusCode::NOT_FOUND
            }
            ServiceError::NotAssigned { .. } => StatusCode::FORBIDDEN,
            ServiceError::Conflict(_) | ServiceError::OutOfOrder(_) | ServiceError::NoOverlap => StatusCode::CONFLICT,
            ServiceError::Invalid { .. } | ServiceError::WrongKind { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("request failed: {e}");
        }
        let body = ErrorBody {
            code: e.code().into(),
            message: e.to_string(),
            field: e.field().map(str::to_string),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bad_request(field: &str, message: String) -> ApiError {
    ApiError(ServiceError::invalid(field, message))
}

fn check_header(headers: &HeaderMap, annotator: &str) -> ApiResult<()> {
    match headers.get(ANNOTATOR_HEADER).map(|v| v.to_str()) {
        None => Ok(()),
        Some(Ok(h)) if h == annotator => Ok(()),
        Some(_) => Err(bad_request(
            "annotator_id",
            format!("header {ANNOTATOR_HEADER} does not match annotator `{annotator}`"),
        )),
    }
}

pub fn router(store: Arc<Store>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/dialogues/{id}", get(dialogue))
        .route("/api/highlights", post(highlights))
        .route("/api/comparisons", post(comparisons))
        .route("/api/progress", get(progress))
        .route("/api/agreement", get(agreement))
        .route("/api/export", get(export));
    let app = match store.config().ui_dir.clone() {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(INDEX_HTML) })),
    };
    app.with_state(store)
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: String,
    kind: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextTask {
    pub task: Option<Task>,
}

async fn next_task(
    State(store): State<Arc<Store>>,
    headers: HeaderMap,
    q: Result<Query<NextQuery>, QueryRejection>,
) -> ApiResult<Json<NextTask>> {
    let Query(q) = q.map_err(|e| bad_request("annotator", e.body_text()))?;
    check_header(&headers, &q.annotator)?;
    let kind = q.kind.as_deref().map(str::parse::<TaskKind>).transpose()?;
    Ok(Json(NextTask {
        task: store.snapshot().next_task(&q.annotator, kind)?,
    }))
}

async fn dialogue(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let d = store.dialogue(&id)?;
    Ok(Json(serde_json::json!({
        "dialogue": d,
        "summaries": store.summaries_of(&id),
    })))
}

async fn highlights(
    State(store): State<Arc<Store>>,
    headers: HeaderMap,
    body: Result<Json<HighlightSubmission>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<hitl_core::corpus::HighlightSet>)> {
    let Json(sub) = body.map_err(|e| bad_request("body", e.body_text()))?;
    check_header(&headers, &sub.annotator_id)?;
    let record = tokio::task::spawn_blocking(move || store.submit_highlights(&sub))
        .await
        .map_err(|e| ApiError(ServiceError::Io(std::io::Error::other(e))))??;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn comparisons(
    State(store): State<Arc<Store>>,
    headers: HeaderMap,
    body: Result<Json<ComparisonSubmission>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<hitl_core::corpus::Comparison>)> {
    let Json(sub) = body.map_err(|e| bad_request("body", e.body_text()))?;
    check_header(&headers, &sub.annotator_id)?;
    let record = tokio::task::spawn_blocking(move || store.submit_comparison(&sub))
        .await
        .map_err(|e| ApiError(ServiceError::Io(std::io::Error::other(e))))??;
    Ok((StatusCode::CREATED, Json(record)))
}

#[derive(Debug, Deserialize)]
struct ProgressQuery {
    annotator: String,
}

async fn progress(
    State(store): State<Arc<Store>>,
    headers: HeaderMap,
    q: Result<Query<ProgressQuery>, QueryRejection>,
) -> ApiResult<Json<crate::store::Progress>> {
    let Query(q) = q.map_err(|e| bad_request("annotator", e.body_text()))?;
    check_header(&headers, &q.annotator)?;
    Ok(Json(store.snapshot().progress(&q.annotator)?))
}

async fn agreement(State(store): State<Arc<Store>>) -> ApiResult<Json<crate::store::AgreementReport>> {
    Ok(Json(store.agreement()?))
}

async fn export(State(store): State<Arc<Store>>) -> Json<crate::store::Export> {
    Json(store.snapshot().export())
}

/// Opens the store and serves until the process is stopped.
pub async fn serve(store: Arc<Store>) -> std::io::Result<()> {
    let cfg = store.config();
    let listener = tokio::net::TcpListener::bind((cfg.bind.as_str(), cfg.port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}
