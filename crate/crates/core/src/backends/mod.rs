//! Model backends: one frozen, inference-only service per role.
//!
//! The pipeline never runs a model itself. Each [`BackendRole`] is served by
//! something implementing [`Backend`]: an [`HttpBackend`] pointing at a
//! model server, or a deterministic [`MockBackend`] for tests and desk runs.
//! [`Backends`] routes typed calls to the right implementation.

mod http;
mod mock;
pub mod wire;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{call_backend, HttpBackend, DEFAULT_TIMEOUT};
pub use mock::{MockBackend, MockDetector, MOCK_MIN_BODY_AREA};
pub use wire::{
    BackendRequest, BackendResponse, DetectResponse, EdgesResponse, EmbedResponse, EnhanceRequest,
    FaceswapRequest, GenerationRequest, GradResponse, ImageRequest, ImageResponse, InpaintRequest, Keypoint,
    PoseRequest, PoseResponse, Route, SegmentResponse, SegmentedBody, WireDetection, KEYPOINT_COUNT,
};

use crate::attack::{Detection, Detector};
use crate::raster::{BinaryMask, BoundingBox, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Segment,
    Pose,
    Edges,
    Embed,
    Inpaint,
    Generate,
    Faceswap,
    Enhance,
    Detect,
}

impl BackendRole {
    pub const ALL: [BackendRole; 9] = [
        BackendRole::Segment,
        BackendRole::Pose,
        BackendRole::Edges,
        BackendRole::Embed,
        BackendRole::Inpaint,
        BackendRole::Generate,
        BackendRole::Faceswap,
        BackendRole::Enhance,
        BackendRole::Detect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendRole::Segment => "segment",
            BackendRole::Pose => "pose",
            BackendRole::Edges => "edges",
            BackendRole::Embed => "embed",
            BackendRole::Inpaint => "inpaint",
            BackendRole::Generate => "generate",
            BackendRole::Faceswap => "faceswap",
            BackendRole::Enhance => "enhance",
            BackendRole::Detect => "detect",
        }
    }
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendRole {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackendRole::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| BackendError::Configuration(format!("unknown backend role {s:?}")))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend configuration error: {0}")]
    Configuration(String),
    #[error("protocol error from {role} backend: {detail}")]
    Protocol { role: String, detail: String },
    #[error("{role} backend timed out after {after:?}")]
    Timeout { role: String, after: Duration },
    #[error("transport error talking to {role} backend: {detail}")]
    Transport { role: String, detail: String },
    #[error("{role} backend answered {status}: {body}")]
    Remote { role: String, status: u16, body: String },
    #[error("{role} backend rejected the request: {detail}")]
    BadRequest { role: String, detail: String },
}

impl BackendError {
    pub fn protocol(role: BackendRole, detail: impl Into<String>) -> Self {
        BackendError::Protocol { role: role.as_str().to_string(), detail: detail.into() }
    }

    pub fn bad_request(role: BackendRole, detail: impl Into<String>) -> Self {
        BackendError::BadRequest { role: role.as_str().to_string(), detail: detail.into() }
    }
}

/// Anything that answers backend requests.
pub trait Backend: Send + Sync {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

/// Wraps a backend and records the route of every call, in order.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    log: Mutex<Vec<Route>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> Vec<Route> {
        self.log.lock().expect("log poisoned").clone()
    }
}

impl Backend for RecordingBackend {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.log.lock().expect("log poisoned").push(request.route());
        self.inner.call(request)
    }
}

/// Role → backend routing table with typed call helpers.
#[derive(Clone, Default)]
pub struct Backends {
    routes: HashMap<BackendRole, Arc<dyn Backend>>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut roles: Vec<_> = self.routes.keys().collect();
        roles.sort();
        f.debug_struct("Backends").field("roles", &roles).finish()
    }
}

impl Backends {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every role served by the in-process mock.
    pub fn mock(seed: u64, embedding_dim: usize) -> Self {
        let mock: Arc<dyn Backend> = Arc::new(MockBackend::new(seed, embedding_dim));
        Self::uniform(mock)
    }

    /// Every role served by the same backend.
    pub fn uniform(backend: Arc<dyn Backend>) -> Self {
        let mut out = Self::new();
        for role in BackendRole::ALL {
            out.routes.insert(role, backend.clone());
        }
        out
    }

    /// One HTTP endpoint per role; keys are role names.
    pub fn from_endpoints(endpoints: &BTreeMap<String, String>, timeout: Duration) -> Result<Self, BackendError> {
        let mut out = Self::new();
        for (name, url) in endpoints {
            let role: BackendRole = name.parse()?;
            out.routes.insert(role, Arc::new(HttpBackend::new(role, url, timeout)?));
        }
        Ok(out)
    }

    pub fn with(mut self, role: BackendRole, backend: Arc<dyn Backend>) -> Self {
        self.routes.insert(role, backend);
        self
    }

    pub fn set(&mut self, role: BackendRole, backend: Arc<dyn Backend>) {
        self.routes.insert(role, backend);
    }

    pub fn has(&self, role: BackendRole) -> bool {
        self.routes.contains_key(&role)
    }

    pub fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let role = request.role();
        let backend = self
            .routes
            .get(&role)
            .ok_or_else(|| BackendError::Configuration(format!("no endpoint registered for role {role}")))?;
        backend.call(request)
    }

    pub fn segment(&self, image: &Image) -> Result<Vec<SegmentedBody>, BackendError> {
        match self.call(&BackendRequest::Segment(ImageRequest { image: image.clone() }))? {
            BackendResponse::Segment(r) => {
                for body in &r.bodies {
                    if body.mask.dims() != image.dims() {
                        return Err(BackendError::protocol(BackendRole::Segment, "field `mask` has wrong dimensions"));
                    }
                }
                Ok(r.bodies)
            }
            other => Err(unexpected(BackendRole::Segment, &other)),
        }
    }

    pub fn pose(&self, image: &Image, bbox: BoundingBox) -> Result<Vec<Keypoint>, BackendError> {
        match self.call(&BackendRequest::Pose(PoseRequest { image: image.clone(), bbox }))? {
            BackendResponse::Pose(r) => Ok(r.keypoints),
            other => Err(unexpected(BackendRole::Pose, &other)),
        }
    }

    pub fn edges(&self, image: &Image) -> Result<Image, BackendError> {
        match self.call(&BackendRequest::Edges(ImageRequest { image: image.clone() }))? {
            BackendResponse::Edges(r) => same_dims(BackendRole::Edges, image, r.edge_map),
            other => Err(unexpected(BackendRole::Edges, &other)),
        }
    }

    pub fn embed(&self, image: &Image) -> Result<EmbedResponse, BackendError> {
        match self.call(&BackendRequest::Embed(ImageRequest { image: image.clone() }))? {
            BackendResponse::Embed(r) => Ok(r),
            other => Err(unexpected(BackendRole::Embed, &other)),
        }
    }

    pub fn inpaint(&self, request: InpaintRequest) -> Result<Image, BackendError> {
        let probe = request.image.clone();
        match self.call(&BackendRequest::Inpaint(request))? {
            BackendResponse::Image(r) => same_dims(BackendRole::Inpaint, &probe, r.image),
            other => Err(unexpected(BackendRole::Inpaint, &other)),
        }
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<Image, BackendError> {
        request.validate().map_err(|e| BackendError::bad_request(BackendRole::Generate, e))?;
        match self.call(&BackendRequest::Generate(request.clone()))? {
            BackendResponse::Image(r) => same_dims(BackendRole::Generate, &request.masked_image, r.image),
            other => Err(unexpected(BackendRole::Generate, &other)),
        }
    }

    pub fn faceswap(&self, request: FaceswapRequest) -> Result<Image, BackendError> {
        let probe = request.image.clone();
        match self.call(&BackendRequest::Faceswap(request))? {
            BackendResponse::Image(r) => same_dims(BackendRole::Faceswap, &probe, r.image),
            other => Err(unexpected(BackendRole::Faceswap, &other)),
        }
    }

    pub fn enhance(&self, request: EnhanceRequest) -> Result<Image, BackendError> {
        let probe = request.image.clone();
        match self.call(&BackendRequest::Enhance(request))? {
            BackendResponse::Image(r) => same_dims(BackendRole::Enhance, &probe, r.image),
            other => Err(unexpected(BackendRole::Enhance, &other)),
        }
    }
}

impl Detector for Backends {
    fn detect(&self, image: &Image) -> Result<Vec<Detection>, BackendError> {
        match self.call(&BackendRequest::Detect(ImageRequest { image: image.clone() }))? {
            BackendResponse::Detect(r) => Ok(r
                .detections
                .into_iter()
                .map(|d| Detection { bbox: d.bbox, objectness: d.objectness })
                .collect()),
            other => Err(unexpected(BackendRole::Detect, &other)),
        }
    }

    fn objectness_grad(&self, image: &Image) -> Result<Vec<f32>, BackendError> {
        match self.call(&BackendRequest::DetectGrad(ImageRequest { image: image.clone() }))? {
            BackendResponse::Grad(r) => {
                if r.shape != [image.height(), image.width(), 3] {
                    return Err(BackendError::protocol(
                        BackendRole::Detect,
                        format!("field `shape` is {:?} for a {}x{} image", r.shape, image.width(), image.height()),
                    ));
                }
                r.decode().map_err(|e| BackendError::protocol(BackendRole::Detect, e))
            }
            other => Err(unexpected(BackendRole::Detect, &other)),
        }
    }
}

fn unexpected(role: BackendRole, got: &BackendResponse) -> BackendError {
    let kind = match got {
        BackendResponse::Segment(_) => "segment",
        BackendResponse::Pose(_) => "pose",
        BackendResponse::Edges(_) => "edges",
        BackendResponse::Embed(_) => "embed",
        BackendResponse::Image(_) => "image",
        BackendResponse::Detect(_) => "detect",
        BackendResponse::Grad(_) => "grad",
    };
    BackendError::protocol(role, format!("unexpected {kind} response"))
}

fn same_dims(role: BackendRole, request: &Image, out: Image) -> Result<Image, BackendError> {
    if out.dims() != request.dims() {
        return Err(BackendError::protocol(
            role,
            format!("field `image` is {:?}, request was {:?}", out.dims(), request.dims()),
        ));
    }
    Ok(out)
}

/// Keeps only the pixels of `edge_map` inside `bbox`.
pub fn restrict_to_box(edge_map: &Image, bbox: BoundingBox) -> Image {
    let outside = BinaryMask::from_fn(edge_map.width(), edge_map.height(), |x, y| !bbox.contains(x, y));
    crate::raster::zero_masked(edge_map, &outside).expect("same dimensions")
}
