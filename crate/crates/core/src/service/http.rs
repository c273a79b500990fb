//! JSON API over a [`TriageService`], mounted under `/api/v1`.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{CreateRunRequest, ReportFormat, ServiceError, TriageService};
use crate::domain::Label;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub detail: serde_json::Value,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                detail: serde_json::Value::Null,
            },
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::UnknownRun(_) | ServiceError::UnknownSample { .. } => StatusCode::NOT_FOUND,
            ServiceError::AlreadyReviewed(_) | ServiceError::NotRoutedForReview(_) => StatusCode::CONFLICT,
            ServiceError::UnlabeledCorpus(_)
            | ServiceError::InvalidRequest(_)
            | ServiceError::Corpus(_)
            | ServiceError::Pipeline(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Provider(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Store(_) | ServiceError::Corrupt(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let detail = match &e {
            ServiceError::AlreadyReviewed(record) => serde_json::to_value(record).unwrap_or_default(),
            _ => serde_json::Value::Null,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %e, "request failed");
        }
        ApiError {
            status,
            body: ErrorBody {
                code: e.code().to_string(),
                message: e.to_string(),
                detail,
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type Shared = Arc<TriageService>;
type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(svc: Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&TriageService) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(service: Arc<TriageService>) -> Router {
    Router::new()
        .route("/api/v1/healthz", get(healthz))
        .route("/api/v1/runs", post(create_run))
        .route("/api/v1/runs/{run}", get(get_run))
        .route("/api/v1/runs/{run}/queue", get(queue))
        .route("/api/v1/runs/{run}/records", get(records))
        .route("/api/v1/runs/{run}/samples/{sample}", get(sample))
        .route("/api/v1/runs/{run}/samples/{sample}/review", post(review))
        .route("/api/v1/runs/{run}/metrics", get(metrics))
        .route("/api/v1/runs/{run}/report", get(report))
        .with_state(service)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_run(
    State(svc): State<Shared>,
    body: Result<Json<CreateRunRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let (desc, created) = blocking(svc, move |s| s.create_run(&req)).await?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(desc)).into_response())
}

async fn get_run(State(svc): State<Shared>, Path(run): Path<String>) -> ApiResult<Response> {
    let desc = blocking(svc, move |s| s.run(&run)).await?;
    Ok(Json(desc).into_response())
}

#[derive(Deserialize)]
struct QueueParams {
    limit: Option<usize>,
}

async fn queue(
    State(svc): State<Shared>,
    Path(run): Path<String>,
    Query(params): Query<QueueParams>,
) -> ApiResult<Response> {
    let limit = params.limit.unwrap_or(50);
    let items = blocking(svc, move |s| s.next_pending(&run, limit)).await?;
    Ok(Json(items).into_response())
}

async fn records(State(svc): State<Shared>, Path(run): Path<String>) -> ApiResult<Response> {
    let items = blocking(svc, move |s| s.records(&run)).await?;
    Ok(Json(items).into_response())
}

async fn sample(State(svc): State<Shared>, Path((run, sample)): Path<(String, String)>) -> ApiResult<Response> {
    let record = blocking(svc, move |s| s.record(&run, &sample)).await?;
    Ok(Json(record).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRequest {
    pub verdict: Label,
    pub analyst: String,
}

async fn review(
    State(svc): State<Shared>,
    Path((run, sample)): Path<(String, String)>,
    body: Result<Json<ReviewRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    if req.analyst.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_request",
            "analyst must not be empty",
        ));
    }
    let record = blocking(svc, move |s| s.submit_review(&run, &sample, req.verdict, &req.analyst)).await?;
    Ok(Json(record).into_response())
}

async fn metrics(State(svc): State<Shared>, Path(run): Path<String>) -> ApiResult<Response> {
    let snap = blocking(svc, move |s| s.run_metrics(&run)).await?;
    Ok(Json(snap).into_response())
}

#[derive(Deserialize)]
struct ReportParams {
    format: Option<String>,
}

async fn report(
    State(svc): State<Shared>,
    Path(run): Path<String>,
    Query(params): Query<ReportParams>,
) -> ApiResult<Response> {
    let format: ReportFormat = params
        .format
        .as_deref()
        .unwrap_or("csv")
        .parse()
        .map_err(|m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", m))?;
    let text = blocking(svc, move |s| s.export_report(&run, format)).await?;
    let content_type = match format {
        ReportFormat::Csv => "text/csv; charset=utf-8",
        ReportFormat::Json => "application/json",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], text).into_response())
}

/// Serves the API until `shutdown` resolves, then checkpoints the store.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<TriageService>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    if let Err(e) = service.flush() {
        tracing::warn!(error = %e, "checkpoint on shutdown failed");
    }
    Ok(())
}
