//! HTTP gateway, job queue and CLI plumbing around the anonymization
//! pipeline.

pub mod api;
pub mod config;
pub mod jobs;
pub mod mock_server;
pub mod service;
pub mod store;

use std::future::Future;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use config::ServiceConfig;
pub use service::{Service, ServiceError};

/// Serves the gateway API on `listener` until `shutdown` resolves.
pub async fn serve(
    service: Arc<Service>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    service.start();
    axum::serve(listener, api::router(service)).with_graceful_shutdown(shutdown).await
}

/// Serves the mock backends on `listener` until `shutdown` resolves.
pub async fn serve_mock(
    seed: u64,
    embedding_dim: usize,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let backend = Arc::new(anonymizer_core::backends::MockBackend::new(seed, embedding_dim));
    axum::serve(listener, mock_server::router(backend)).with_graceful_shutdown(shutdown).await
}
