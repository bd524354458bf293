//! Service configuration, loaded from a JSON file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anonymizer_core::{AnonymizationChoice, BackendRole, PipelineConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_WORKERS: usize = 2;
pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;
pub const DEFAULT_TIMEOUT_SECS: u64 = 30;
pub const DEFAULT_MOCK_DIM: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// In-process mock backends instead of HTTP endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSettings {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mock_dim")]
    pub embedding_dim: usize,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self { seed: 0, embedding_dim: DEFAULT_MOCK_DIM }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPaths {
    pub body: Option<PathBuf>,
    pub face: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// Role name → base URL, e.g. `"segment": "http://10.0.0.5:9001"`.
    #[serde(default)]
    pub endpoints: BTreeMap<String, String>,
    /// Roles without an endpoint fall back to the mock when this is set.
    #[serde(default)]
    pub mock: Option<MockSettings>,
    #[serde(default)]
    pub manifolds: ManifoldPaths,
    /// Attack, dilation and generation defaults.
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_store_dir")]
    pub store_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_max_upload")]
    pub max_upload_bytes: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_options")]
    pub enabled_options: Vec<AnonymizationChoice>,
}

fn default_mock_dim() -> usize {
    DEFAULT_MOCK_DIM
}
fn default_listen() -> String {
    DEFAULT_LISTEN.to_string()
}
fn default_store_dir() -> PathBuf {
    PathBuf::from("anonymizer-store")
}
fn default_workers() -> usize {
    DEFAULT_WORKERS
}
fn default_max_upload() -> usize {
    DEFAULT_MAX_UPLOAD_BYTES
}
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_options() -> Vec<AnonymizationChoice> {
    AnonymizationChoice::ALL.to_vec()
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            endpoints: BTreeMap::new(),
            mock: None,
            manifolds: ManifoldPaths::default(),
            pipeline: PipelineConfig::default(),
            listen: default_listen(),
            store_dir: default_store_dir(),
            workers: DEFAULT_WORKERS,
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            enabled_options: default_options(),
        }
    }
}

/// Backend roles an option can reach, merge pass included.
pub fn roles_for(option: AnonymizationChoice) -> &'static [BackendRole] {
    use BackendRole::*;
    match option {
        AnonymizationChoice::PhysicalRemoval => &[Inpaint],
        AnonymizationChoice::AdversarialRemoval => &[Detect],
        AnonymizationChoice::MaskBasedRemoval => &[Embed, Generate],
        // overlapping identity regions are merged by inpainting
        AnonymizationChoice::IdentityRemoval => &[Embed, Faceswap, Enhance, Inpaint],
        AnonymizationChoice::NoAction => &[],
    }
}

/// Detection always needs these.
pub const DETECTION_ROLES: [BackendRole; 3] = [BackendRole::Segment, BackendRole::Pose, BackendRole::Edges];

impl ServiceConfig {
    /// A config backed entirely by in-process mocks.
    pub fn mock(seed: u64, store_dir: impl Into<PathBuf>) -> Self {
        Self { mock: Some(MockSettings { seed, ..MockSettings::default() }), store_dir: store_dir.into(), ..Self::default() }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn required_roles(&self) -> BTreeSet<BackendRole> {
        let mut roles: BTreeSet<BackendRole> = DETECTION_ROLES.into_iter().collect();
        for option in &self.enabled_options {
            roles.extend(roles_for(*option).iter().copied());
        }
        roles
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.workers == 0 {
            return invalid("workers must be >= 1".into());
        }
        if self.max_upload_bytes == 0 {
            return invalid("max_upload_bytes must be >= 1".into());
        }
        if self.timeout_secs == 0 {
            return invalid("timeout_secs must be >= 1".into());
        }
        if self.enabled_options.is_empty() {
            return invalid("enabled_options must not be empty".into());
        }
        if let Some(m) = &self.mock {
            if m.embedding_dim == 0 {
                return invalid("mock.embedding_dim must be >= 1".into());
            }
        }
        self.pipeline.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut configured = BTreeSet::new();
        for name in self.endpoints.keys() {
            match name.parse::<BackendRole>() {
                Ok(role) => {
                    configured.insert(role);
                }
                Err(e) => return invalid(e.to_string()),
            }
        }
        if self.mock.is_none() {
            let missing: Vec<&str> =
                self.required_roles().into_iter().filter(|r| !configured.contains(r)).map(|r| r.as_str()).collect();
            if !missing.is_empty() {
                return invalid(format!("enabled options need endpoints for: {}", missing.join(", ")));
            }
            let enabled = |o| self.enabled_options.contains(&o);
            if enabled(AnonymizationChoice::MaskBasedRemoval) && self.manifolds.body.is_none() {
                return invalid("mask_based_removal is enabled but manifolds.body is not set".into());
            }
            if enabled(AnonymizationChoice::IdentityRemoval) && self.manifolds.face.is_none() {
                return invalid("identity_removal is enabled but manifolds.face is not set".into());
            }
        }
        Ok(())
    }
}
