//! Per-body full-body anonymization.
//!
//! Every person found in an image gets one of five options: physical removal,
//! adversarial removal, mask-based removal, identity removal or no action.
//! This crate holds the orchestration logic: an activity-balanced embedding
//! manifold with farthest-guide search, the raster operations that assemble
//! conditioning inputs, an objectness-vanishing attack against a person
//! detector, typed clients (and deterministic mocks) for the model backends
//! doing the actual inference, the order-invariant multi-body pipeline and
//! the evaluation metrics.

pub mod attack;
pub mod backends;
pub mod manifold;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod synthetic;

pub use attack::{vanish_attack, AdversarialResult, AttackConfig, Detection, Detector};
pub use backends::{BackendError, BackendRole, Backends};
pub use manifold::{cosine_distance, BodyManifold, Embedding, ManifoldEntry, ManifoldError};
pub use pipeline::{AnonymizationChoice, AnonymizationRequest, BodyInstance, Pipeline, PipelineConfig};
pub use raster::{BinaryMask, BoundingBox, Image, RasterError};
