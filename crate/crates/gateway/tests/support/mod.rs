#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use anonymizer_gateway::{Service, ServiceConfig};
use serde_json::Value;
use tokio::runtime::Runtime;

/// A gateway served on an ephemeral port from its own runtime.
pub struct Gateway {
    pub base: String,
    pub service: Arc<Service>,
    runtime: Option<Runtime>,
}

impl Gateway {
    pub fn start(config: ServiceConfig) -> Self {
        let service = Service::new(config).expect("valid config");
        Self::with_service(service)
    }

    pub fn with_service(service: Arc<Service>) -> Self {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let svc = service.clone();
        runtime.spawn(async move { anonymizer_gateway::serve(svc, listener, std::future::pending()).await });
        Self { base, service, runtime: Some(runtime) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    /// Stops serving; the store stays on disk.
    pub fn stop(mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(5));
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

/// Serves the mock backends on an ephemeral port; returns the base URL.
pub fn start_mock_backends(seed: u64, dim: usize) -> (String, Runtime) {
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    runtime.spawn(anonymizer_gateway::serve_mock(seed, dim, listener, std::future::pending()));
    (base, runtime)
}

pub struct Reply {
    pub status: u16,
    pub correlation: Option<String>,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

fn finish(response: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
    let mut r = response.expect("request reaches the gateway");
    let header = |name: &str| r.headers().get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
    let correlation = header("x-correlation-id");
    let content_type = header("content-type");
    let body = r.body_mut().with_config().limit(256 * 1024 * 1024).read_to_vec().unwrap();
    Reply { status: r.status().as_u16(), correlation, content_type, body }
}

pub fn get(url: &str) -> Reply {
    finish(agent().get(url).call())
}

pub fn get_with(url: &str, correlation: &str) -> Reply {
    finish(agent().get(url).header("x-correlation-id", correlation).call())
}

pub fn post(url: &str, content_type: &str, body: &[u8]) -> Reply {
    finish(agent().post(url).header("content-type", content_type).send(body))
}

pub fn post_json(url: &str, value: &Value) -> Reply {
    post(url, "application/json", &serde_json::to_vec(value).unwrap())
}

pub fn multipart(field: &str, file_name: &str, bytes: &[u8]) -> (String, Vec<u8>) {
    let boundary = "----anonymizer-test-boundary";
    let mut body = Vec::new();
    body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
    body.extend_from_slice(
        format!("Content-Disposition: form-data; name=\"{field}\"; filename=\"{file_name}\"\r\n").as_bytes(),
    );
    body.extend_from_slice(b"Content-Type: application/octet-stream\r\n\r\n");
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

pub fn upload(gw: &Gateway, png: &[u8]) -> Value {
    let r = post(&gw.url("/v1/images"), "application/octet-stream", png);
    assert_eq!(r.status, 201, "{}", String::from_utf8_lossy(&r.body));
    r.json()
}

/// Polls a job until it is done or failed.
pub fn wait_job(gw: &Gateway, job_id: &str, timeout: Duration) -> Value {
    let start = Instant::now();
    loop {
        let r = get(&gw.url(&format!("/v1/jobs/{job_id}")));
        assert_eq!(r.status, 200);
        let job = r.json();
        if job["state"] == "done" || job["state"] == "failed" {
            return job;
        }
        assert!(start.elapsed() < timeout, "job {job_id} stuck in {}", job["state"]);
        std::thread::sleep(Duration::from_millis(5));
    }
}

/// Submits choices, waits, and returns (job JSON, result PNG bytes if done).
pub fn anonymize(gw: &Gateway, image_id: &str, seed: u64, choices: Value) -> (Value, Option<Vec<u8>>) {
    let r = post_json(&gw.url("/v1/anonymize"), &serde_json::json!({"image_id": image_id, "seed": seed, "choices": choices}));
    assert_eq!(r.status, 202, "{}", String::from_utf8_lossy(&r.body));
    let job_id = r.json()["job_id"].as_str().unwrap().to_string();
    let job = wait_job(gw, &job_id, Duration::from_secs(60));
    if job["state"] != "done" {
        return (job, None);
    }
    let res = get(&gw.url(&format!("/v1/results/{job_id}")));
    assert_eq!(res.status, 200);
    assert_eq!(res.content_type.as_deref(), Some("image/png"));
    (job, Some(res.body))
}
