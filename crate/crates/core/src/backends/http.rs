use std::time::Duration;

use ureq::Agent;

use super::wire::{BackendRequest, BackendResponse};
use super::{Backend, BackendError, BackendRole};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const MAX_RESPONSE_BYTES: u64 = 512 * 1024 * 1024;

/// JSON-over-HTTP client for one role: `POST {base}/v1/{route}`.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    role: BackendRole,
    base_url: String,
    timeout: Duration,
    agent: Agent,
}

impl HttpBackend {
    pub fn new(role: BackendRole, base_url: &str, timeout: Duration) -> Result<Self, BackendError> {
        let base_url = base_url.trim_end_matches('/').to_string();
        if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
            return Err(BackendError::Configuration(format!("endpoint for {role} must be an http(s) URL, got {base_url:?}")));
        }
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { role, base_url, timeout, agent })
    }

    pub fn role(&self) -> BackendRole {
        self.role
    }

    fn post_once(&self, url: &str, body: &[u8]) -> Result<(u16, String), Attempt> {
        let mut response = self
            .agent
            .post(url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| self.classify(e))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_to_string()
            .map_err(|e| self.classify(e))?;
        Ok((status, text))
    }

    fn classify(&self, error: ureq::Error) -> Attempt {
        let role = self.role.as_str().to_string();
        match error {
            ureq::Error::Timeout(_) => Attempt::Fatal(BackendError::Timeout { role, after: self.timeout }),
            e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound) => {
                Attempt::Transient(BackendError::Transport { role, detail: e.to_string() })
            }
            e => Attempt::Fatal(BackendError::Transport { role, detail: e.to_string() }),
        }
    }
}

enum Attempt {
    Transient(BackendError),
    Fatal(BackendError),
}

impl Backend for HttpBackend {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        if request.role() != self.role {
            return Err(BackendError::Configuration(format!(
                "{} request sent to the {} endpoint",
                request.role(),
                self.role
            )));
        }
        let route = request.route();
        let url = format!("{}/v1/{}", self.base_url, route.path());
        let body = request.to_json()?;
        // one retry, transport failures only
        let (status, text) = match self.post_once(&url, &body) {
            Ok(ok) => ok,
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Transient(_)) => match self.post_once(&url, &body) {
                Ok(ok) => ok,
                Err(Attempt::Fatal(e) | Attempt::Transient(e)) => return Err(e),
            },
        };
        if !(200..300).contains(&status) {
            return Err(BackendError::Remote { role: self.role.as_str().to_string(), status, body: text });
        }
        BackendResponse::from_json(route, text.as_bytes())
    }
}

/// One-off call against `endpoint` without building a routing table.
pub fn call_backend(
    role: BackendRole,
    request: &BackendRequest,
    endpoint: &str,
    timeout: Duration,
) -> Result<BackendResponse, BackendError> {
    HttpBackend::new(role, endpoint, timeout)?.call(request)
}
