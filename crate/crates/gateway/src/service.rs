//! The gateway state: pipeline, persisted store and the job queue.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Duration;

use anonymizer_core::backends::HttpBackend;
use anonymizer_core::pipeline::BodyChoice;
use anonymizer_core::{
    AnonymizationChoice, AnonymizationRequest, BackendRole, Backends, BodyManifold, Image, ManifoldEntry, Pipeline,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::runtime::Handle;
use tokio::sync::Semaphore;

use crate::config::ServiceConfig;
use crate::jobs::{Job, JobState};
use crate::store::{sha256_hex, BodySummary, ImageRecord, Index, Store};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    PayloadTooLarge(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    fn internal(e: impl std::fmt::Display) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

/// Body of `POST /v1/anonymize`. Options stay strings here so a bad one can
/// be reported with the list of legal values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnonymizeSubmission {
    pub image_id: String,
    #[serde(default)]
    pub seed: u64,
    pub choices: Vec<SubmittedChoice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmittedChoice {
    pub body_id: String,
    pub option: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub bodies: Vec<BodySummary>,
}

pub const DEMO_ACTIVITIES: usize = 4;
pub const DEMO_PER_CLASS: usize = 8;
pub const DEMO_FACES: usize = 32;

/// Random manifolds for running against mock backends without manifold
/// files. Body activities match the mock embedder's labels.
pub fn demo_manifolds(seed: u64, dim: usize) -> (BodyManifold, BodyManifold) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_6e69_666f_6c64);
    let vector = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
    let mut bodies = Vec::new();
    for a in 0..DEMO_ACTIVITIES {
        for i in 0..DEMO_PER_CLASS {
            let e = ManifoldEntry::new(format!("demo-body-{a}-{i:02}"), format!("mock-activity-{a}"), vector(&mut rng), None)
                .expect("random vector is non-zero");
            bodies.push(e);
        }
    }
    let faces = (0..DEMO_FACES)
        .map(|i| ManifoldEntry::new(format!("demo-face-{i:02}"), "face", vector(&mut rng), None).expect("non-zero"))
        .collect();
    (
        BodyManifold::build(bodies, DEMO_PER_CLASS, dim).expect("balanced"),
        BodyManifold::build(faces, DEMO_FACES, dim).expect("balanced"),
    )
}

pub fn load_manifold(path: &Path) -> anyhow::Result<BodyManifold> {
    let file = File::open(path).map_err(|e| anyhow::anyhow!("cannot open manifold {}: {e}", path.display()))?;
    BodyManifold::read_from(BufReader::new(file)).map_err(|e| anyhow::anyhow!("manifold {}: {e}", path.display()))
}

/// Builds the backend routing table and pipeline described by `config`.
pub fn build_pipeline(config: &ServiceConfig) -> anyhow::Result<Pipeline> {
    let mut backends = match &config.mock {
        Some(m) => Backends::mock(m.seed, m.embedding_dim),
        None => Backends::new(),
    };
    for (name, url) in &config.endpoints {
        let role: BackendRole = name.parse()?;
        backends.set(role, Arc::new(HttpBackend::new(role, url, config.timeout())?));
    }
    let demo = config.mock.as_ref().map(|m| demo_manifolds(m.seed, m.embedding_dim));
    let body = match (&config.manifolds.body, &demo) {
        (Some(p), _) => Some(load_manifold(p)?),
        (None, Some((b, _))) => Some(b.clone()),
        _ => None,
    };
    let face = match (&config.manifolds.face, &demo) {
        (Some(p), _) => Some(load_manifold(p)?),
        (None, Some((_, f))) => Some(f.clone()),
        _ => None,
    };
    let mut pipeline = Pipeline::new(backends).with_config(config.pipeline.clone());
    if let Some(b) = body {
        pipeline = pipeline.with_body_manifold(Arc::new(b));
    }
    if let Some(f) = face {
        pipeline = pipeline.with_face_manifold(Arc::new(f));
    }
    Ok(pipeline)
}

#[derive(Serialize)]
struct DigestInput<'a> {
    image_id: &'a str,
    seed: u64,
    choices: &'a [BodyChoice],
    config: &'a anonymizer_core::PipelineConfig,
}

pub struct Service {
    config: ServiceConfig,
    pipeline: Arc<Pipeline>,
    store: Store,
    index: Mutex<Index>,
    permits: Arc<Semaphore>,
    runtime: OnceLock<Handle>,
}

impl Service {
    /// Opens the store and recovers its jobs: jobs that were running when
    /// the previous process stopped are failed, queued ones wait for
    /// [`Service::start`].
    pub fn new(config: ServiceConfig) -> anyhow::Result<Arc<Self>> {
        config.validate()?;
        let pipeline = build_pipeline(&config)?;
        Self::with_pipeline(config, pipeline)
    }

    pub fn with_pipeline(config: ServiceConfig, pipeline: Pipeline) -> anyhow::Result<Arc<Self>> {
        let store = Store::open(&config.store_dir)?;
        let mut index = store.load_index()?;
        let mut changed = false;
        for job in index.jobs.values_mut() {
            if job.state == JobState::Running {
                job.fail("interrupted by a gateway restart")?;
                changed = true;
            }
        }
        if changed {
            store.save_index(&index)?;
        }
        Ok(Arc::new(Self {
            permits: Arc::new(Semaphore::new(config.workers)),
            config,
            pipeline: Arc::new(pipeline),
            store,
            index: Mutex::new(index),
            runtime: OnceLock::new(),
        }))
    }

    /// Binds the job queue to the current tokio runtime and requeues
    /// persisted queued jobs.
    pub fn start(self: &Arc<Self>) {
        let _ = self.runtime.set(Handle::current());
        let queued: Vec<String> = {
            let index = self.lock();
            index.job_order.iter().filter(|id| index.jobs[*id].state == JobState::Queued).cloned().collect()
        };
        for id in queued {
            log::info!("requeueing job {id}");
            self.dispatch(id);
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    fn lock(&self) -> MutexGuard<'_, Index> {
        self.index.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self, index: &Index) -> Result<(), ServiceError> {
        self.store.save_index(index).map_err(ServiceError::internal)
    }

    pub async fn submit_image(&self, bytes: Vec<u8>) -> Result<ImageSummary, ServiceError> {
        if bytes.is_empty() {
            return Err(ServiceError::BadRequest("empty image payload".into()));
        }
        if bytes.len() > self.config.max_upload_bytes {
            return Err(ServiceError::PayloadTooLarge(format!(
                "payload of {} bytes exceeds the {} byte limit",
                bytes.len(),
                self.config.max_upload_bytes
            )));
        }
        let image_id = sha256_hex(&bytes);
        if let Some(rec) = self.lock().images.get(&image_id) {
            return Ok(summary(&image_id, rec));
        }
        let image = Image::decode(&bytes).map_err(|e| ServiceError::BadRequest(format!("cannot decode image: {e}")))?;
        let pipeline = self.pipeline.clone();
        let decoded = image.clone();
        let bodies = tokio::task::spawn_blocking(move || pipeline.detect_bodies(&decoded))
            .await
            .map_err(ServiceError::internal)?
            .map_err(|e| ServiceError::Internal(format!("body detection failed: {e}")))?;
        let record = ImageRecord {
            width: image.width(),
            height: image.height(),
            bodies: bodies
                .iter()
                .map(|b| BodySummary { body_id: b.body_id.clone(), bbox: b.bbox, confidence: b.confidence })
                .collect(),
        };
        let stored = self.store.put_blob(&bytes).map_err(ServiceError::internal)?;
        debug_assert_eq!(stored, image_id);
        let mut index = self.lock();
        index.images.insert(image_id.clone(), record.clone());
        self.persist(&index)?;
        Ok(summary(&image_id, &record))
    }

    pub fn image(&self, image_id: &str) -> Option<ImageSummary> {
        self.lock().images.get(image_id).map(|r| summary(image_id, r))
    }

    /// Validates a submission and queues it; returns the job id.
    pub fn submit_anonymize(self: &Arc<Self>, submission: &AnonymizeSubmission) -> Result<String, ServiceError> {
        let choices = self.validate_submission(submission)?;
        let digest = self.request_digest(&submission.image_id, submission.seed, &choices);
        let job_id = uuid::Uuid::new_v4().to_string();
        {
            let mut index = self.lock();
            index.jobs.insert(
                job_id.clone(),
                Job::new(job_id.clone(), digest, submission.image_id.clone(), submission.seed, choices),
            );
            index.job_order.push(job_id.clone());
            self.persist(&index)?;
        }
        self.dispatch(job_id.clone());
        Ok(job_id)
    }

    /// Queues a fresh job with the same image, seed and choices as `job_id`.
    pub fn replay(self: &Arc<Self>, job_id: &str) -> Result<String, ServiceError> {
        let job = self.job(job_id)?;
        let submission = AnonymizeSubmission {
            image_id: job.image_id,
            seed: job.seed,
            choices: job
                .choices
                .iter()
                .map(|c| SubmittedChoice { body_id: c.body_id.clone(), option: c.option.as_str().to_string() })
                .collect(),
        };
        self.submit_anonymize(&submission)
    }

    fn validate_submission(&self, s: &AnonymizeSubmission) -> Result<Vec<BodyChoice>, ServiceError> {
        let record = self
            .lock()
            .images
            .get(&s.image_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown image_id {:?}", s.image_id)))?;
        let mut seen: BTreeMap<&str, AnonymizationChoice> = BTreeMap::new();
        let mut out = Vec::with_capacity(s.choices.len());
        for c in &s.choices {
            let option: AnonymizationChoice =
                c.option.parse().map_err(|e: anonymizer_core::pipeline::InvalidChoice| ServiceError::BadRequest(e.to_string()))?;
            if !record.bodies.iter().any(|b| b.body_id == c.body_id) {
                return Err(ServiceError::NotFound(format!("unknown body_id {:?} for image {}", c.body_id, s.image_id)));
            }
            if !self.config.enabled_options.contains(&option) {
                return Err(ServiceError::BadRequest(format!("option {option} is not enabled on this gateway")));
            }
            if let Some(prev) = seen.insert(&c.body_id, option) {
                if prev != option {
                    return Err(ServiceError::BadRequest(format!(
                        "body {} has conflicting choices {prev} and {option}",
                        c.body_id
                    )));
                }
                continue;
            }
            out.push(BodyChoice { body_id: c.body_id.clone(), option });
        }
        Ok(out)
    }

    /// Hash of everything that determines the output; choice order is
    /// irrelevant to the result, so choices are sorted first.
    fn request_digest(&self, image_id: &str, seed: u64, choices: &[BodyChoice]) -> String {
        let mut sorted = choices.to_vec();
        sorted.sort_by(|a, b| a.body_id.cmp(&b.body_id));
        let input = DigestInput { image_id, seed, choices: &sorted, config: &self.config.pipeline };
        sha256_hex(&serde_json::to_vec(&input).expect("digest input serializes"))
    }

    pub fn job(&self, job_id: &str) -> Result<Job, ServiceError> {
        self.lock().jobs.get(job_id).cloned().ok_or_else(|| ServiceError::NotFound(format!("unknown job_id {job_id:?}")))
    }

    pub fn job_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts: BTreeMap<&'static str, usize> =
            [JobState::Queued, JobState::Running, JobState::Done, JobState::Failed].iter().map(|s| (s.as_str(), 0)).collect();
        for job in self.lock().jobs.values() {
            *counts.get_mut(job.state.as_str()).expect("all states present") += 1;
        }
        counts
    }

    /// PNG bytes of a finished job.
    pub fn result_png(&self, job_id: &str) -> Result<Vec<u8>, ServiceError> {
        let job = self.job(job_id)?;
        match (job.state, &job.result_id) {
            (JobState::Done, Some(id)) => self
                .store
                .get_blob(id)
                .map_err(ServiceError::internal)?
                .ok_or_else(|| ServiceError::Internal(format!("result blob {id} missing from the store"))),
            (JobState::Failed, _) => Err(ServiceError::Conflict(format!(
                "job {job_id} failed: {}",
                job.error.as_deref().unwrap_or("unknown error")
            ))),
            (state, _) => Err(ServiceError::Conflict(format!("job {job_id} is {state}, no result yet"))),
        }
    }

    /// Polls until the job reaches a terminal state or `timeout` passes.
    pub async fn wait(&self, job_id: &str, timeout: Duration) -> Result<Job, ServiceError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let job = self.job(job_id)?;
            if job.state.is_terminal() {
                return Ok(job);
            }
            if tokio::time::Instant::now() >= deadline {
                return Err(ServiceError::Conflict(format!("job {job_id} still {} after {timeout:?}", job.state)));
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    fn transition(&self, job_id: &str, update: impl FnOnce(&mut Job) -> Result<(), crate::jobs::IllegalTransition>) {
        let mut index = self.lock();
        let job = index.jobs.get_mut(job_id).expect("dispatched jobs exist");
        if let Err(e) = update(job) {
            log::error!("{e}");
            return;
        }
        if let Err(e) = self.persist(&index) {
            log::error!("cannot persist job {job_id}: {e}");
        }
    }

    fn dispatch(self: &Arc<Self>, job_id: String) {
        let svc = self.clone();
        let handle = self.runtime.get().cloned().unwrap_or_else(Handle::current);
        handle.spawn(async move {
            let _permit = svc.permits.clone().acquire_owned().await.expect("semaphore is never closed");
            svc.transition(&job_id, |j| j.advance(JobState::Running));
            let worker = svc.clone();
            let id = job_id.clone();
            let outcome = tokio::task::spawn_blocking(move || worker.execute(&id)).await;
            match outcome {
                Ok(Ok((result_id, warnings))) => {
                    log::info!("job {job_id} done");
                    svc.transition(&job_id, |j| {
                        j.advance(JobState::Done)?;
                        j.result_id = Some(result_id);
                        j.warnings = warnings;
                        Ok(())
                    })
                }
                Ok(Err(e)) => {
                    log::warn!("job {job_id} failed: {e}");
                    svc.transition(&job_id, |j| j.fail(e))
                }
                Err(e) => svc.transition(&job_id, |j| j.fail(format!("worker crashed: {e}"))),
            }
        });
    }

    /// Runs the pipeline for a queued job; returns (result blob id, warnings).
    fn execute(&self, job_id: &str) -> Result<(String, Vec<String>), String> {
        let job = self.job(job_id).map_err(|e| e.to_string())?;
        let bytes = self
            .store
            .get_blob(&job.image_id)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| format!("image {} missing from the store", job.image_id))?;
        let image = Image::decode(&bytes).map_err(|e| e.to_string())?;
        let request =
            AnonymizationRequest { image, choices: job.choices, seed: job.seed, config: self.config.pipeline.clone() };
        let output = self.pipeline.anonymize(&request).map_err(|e| e.to_string())?;
        let png = output.image.to_png().map_err(|e| e.to_string())?;
        let result_id = self.store.put_blob(&png).map_err(|e| e.to_string())?;
        Ok((result_id, output.warnings))
    }
}

fn summary(image_id: &str, rec: &ImageRecord) -> ImageSummary {
    ImageSummary { image_id: image_id.to_string(), width: rec.width, height: rec.height, bodies: rec.bodies.clone() }
}
