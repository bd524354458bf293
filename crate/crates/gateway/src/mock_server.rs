//! Serves the deterministic mock over the backend wire protocol, one path
//! per role plus `/v1/detect/grad`.

use std::sync::Arc;

use anonymizer_core::backends::{Backend, BackendRequest, MockBackend, Route};
use anonymizer_core::{BackendError, BackendRole};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;

const BODY_LIMIT: usize = 256 * 1024 * 1024;

pub fn router(backend: Arc<MockBackend>) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { "ok" }))
        .route("/v1/detect/grad", post(grad))
        .route("/v1/{role}", post(role))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(backend)
}

async fn grad(State(backend): State<Arc<MockBackend>>, body: Bytes) -> Response {
    handle(backend, Route::DetectGrad, body).await
}

async fn role(State(backend): State<Arc<MockBackend>>, Path(role): Path<String>, body: Bytes) -> Response {
    match role.parse::<BackendRole>() {
        Ok(r) => handle(backend, Route::Role(r), body).await,
        Err(e) => (StatusCode::NOT_FOUND, e.to_string()).into_response(),
    }
}

async fn handle(backend: Arc<MockBackend>, route: Route, body: Bytes) -> Response {
    let request = match BackendRequest::from_json(route, &body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let outcome = tokio::task::spawn_blocking(move || backend.call(&request)).await;
    let response = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(e @ BackendError::BadRequest { .. })) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
        Ok(Err(e)) => return (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        Err(e) => return (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    };
    match response.to_json() {
        Ok(json) => ([(header::CONTENT_TYPE, "application/json")], json).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}
