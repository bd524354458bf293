//! HTTP routes of the gateway.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use crate::service::{AnonymizeSubmission, Service, ServiceError};

pub const CORRELATION_HEADER: &str = "x-correlation-id";

/// Correlation id of the current request, available as an extension.
#[derive(Debug, Clone)]
pub struct CorrelationId(pub String);

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let (status, code) = match &e {
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::PayloadTooLarge(_) => (StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large"),
            ServiceError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

fn rejection(status: StatusCode, message: String) -> ApiError {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, "payload_too_large", message)
    } else {
        ApiError::bad_request(message)
    }
}

pub fn router(service: Arc<Service>) -> Router {
    // headroom for multipart framing; the service enforces the exact limit
    let limit = service.config().max_upload_bytes.saturating_add(64 * 1024);
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/images", post(upload))
        .route("/v1/images/{image_id}", get(image))
        .route("/v1/anonymize", post(anonymize))
        .route("/v1/jobs/{job_id}", get(job))
        .route("/v1/results/{job_id}", get(result))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn(correlation))
        .with_state(service)
}

fn valid_correlation(v: &str) -> bool {
    !v.is_empty() && v.len() <= 128 && v.bytes().all(|b| b.is_ascii_graphic())
}

async fn correlation(mut request: Request, next: Next) -> Response {
    let id = request
        .headers()
        .get(CORRELATION_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| valid_correlation(v))
        .map(str::to_string)
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    request.extensions_mut().insert(CorrelationId(id.clone()));
    let mut response = next.run(request).await;
    response.headers_mut().insert(CORRELATION_HEADER, HeaderValue::from_str(&id).expect("validated ascii"));
    response
}

async fn health(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    let cfg = svc.config();
    Json(json!({
        "status": "ok",
        "workers": cfg.workers,
        "mock_backends": cfg.mock.is_some(),
        "enabled_options": cfg.enabled_options,
        "jobs": svc.job_counts(),
    }))
}

async fn upload(State(svc): State<Arc<Service>>, request: Request) -> Result<Response, ApiError> {
    let is_multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let bytes = if is_multipart {
        let mut form = Multipart::from_request(request, &()).await.map_err(|e| rejection(e.status(), e.body_text()))?;
        let mut found = None;
        while let Some(field) = form.next_field().await.map_err(|e| rejection(e.status(), e.body_text()))? {
            let wanted = matches!(field.name(), Some("image" | "file")) || field.file_name().is_some();
            let data = field.bytes().await.map_err(|e| rejection(e.status(), e.body_text()))?;
            if wanted && found.is_none() {
                found = Some(data);
            }
        }
        found.ok_or_else(|| ApiError::bad_request("multipart body has no \"image\" or file field"))?
    } else {
        Bytes::from_request(request, &()).await.map_err(|e| rejection(e.status(), e.body_text()))?
    };
    let summary = svc.submit_image(bytes.to_vec()).await?;
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn image(State(svc): State<Arc<Service>>, Path(image_id): Path<String>) -> Result<Response, ApiError> {
    let summary = svc
        .image(&image_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown image_id {image_id:?}")))?;
    Ok(Json(summary).into_response())
}

async fn anonymize(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Response, ApiError> {
    let submission: AnonymizeSubmission =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    let job_id = svc.submit_anonymize(&submission)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response())
}

async fn job(State(svc): State<Arc<Service>>, Path(job_id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(svc.job(&job_id)?).into_response())
}

async fn result(State(svc): State<Arc<Service>>, Path(job_id): Path<String>) -> Result<Response, ApiError> {
    let png = svc.result_png(&job_id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
