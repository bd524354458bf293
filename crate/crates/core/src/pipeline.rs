//! Per-body option execution and the order-free multi-body flow.
//!
//! `anonymize` runs in four stages:
//!
//! 1. detect bodies and put them in canonical order (bbox x, y, body id);
//! 2. run every physical / mask-based / identity body independently against
//!    the original image, each producing a full-size patch and a region;
//! 3. composite: pixels owned by one region take that body's patch, pixels
//!    claimed by several regions are filled by a single merge call;
//! 4. attack the composited image for the adversarial bodies.
//!
//! Pixels of NoAction bodies are carved out of every region (unless they also
//! belong to an acting body), so a protected person is never repainted.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{vanish_attack_targeted, AdversarialResult, AttackConfig, AttackError};
use crate::backends::wire::{EnhanceRequest, FaceswapRequest, GenerationRequest, InpaintRequest, Keypoint};
use crate::backends::{restrict_to_box, BackendError, Backends};
use crate::manifold::{BodyManifold, Embedding, ManifoldError, DEFAULT_SPHERE_K};
use crate::raster::{self, BinaryMask, BoundingBox, Image, RasterError};

pub const DEFAULT_STEPS: u32 = 60;
pub const MIN_FACE_HEIGHT: u32 = 12;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown body_id {0:?}")]
    UnknownBody(String),
    #[error("body {body_id} has conflicting choices {first} and {second}")]
    ConflictingChoice { body_id: String, first: AnonymizationChoice, second: AnonymizationChoice },
    #[error("no {0} manifold loaded")]
    MissingManifold(&'static str),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnonymizationChoice {
    PhysicalRemoval,
    AdversarialRemoval,
    MaskBasedRemoval,
    IdentityRemoval,
    NoAction,
}

impl AnonymizationChoice {
    pub const ALL: [AnonymizationChoice; 5] = [
        Self::PhysicalRemoval,
        Self::AdversarialRemoval,
        Self::MaskBasedRemoval,
        Self::IdentityRemoval,
        Self::NoAction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PhysicalRemoval => "physical_removal",
            Self::AdversarialRemoval => "adversarial_removal",
            Self::MaskBasedRemoval => "mask_based_removal",
            Self::IdentityRemoval => "identity_removal",
            Self::NoAction => "no_action",
        }
    }
}

impl fmt::Display for AnonymizationChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid option {given:?}; expected one of: physical_removal, adversarial_removal, mask_based_removal, identity_removal, no_action")]
pub struct InvalidChoice {
    pub given: String,
}

impl FromStr for AnonymizationChoice {
    type Err = InvalidChoice;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| InvalidChoice { given: s.to_string() })
    }
}

/// Where the adversarial perturbation may land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialScope {
    /// Whole image except protected (NoAction) bodies.
    #[default]
    Image,
    /// Only the dilated masks of the adversarial bodies.
    Bodies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Fixed dilation radius; `None` derives one per body from its bbox.
    pub dilation_radius: Option<u32>,
    pub dilation_iterations: u32,
    /// Border blend width for single-owner compositing; 0 is a hard paste.
    pub feather: u32,
    pub steps: u32,
    pub sphere_k: usize,
    /// Face region height as a fraction of the body bbox, from the top.
    pub face_fraction: f64,
    pub min_face_height: u32,
    pub attack: AttackConfig,
    pub adversarial_scope: AdversarialScope,
    /// Run per-body passes concurrently.
    pub parallel: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dilation_radius: None,
            dilation_iterations: 1,
            feather: 0,
            steps: DEFAULT_STEPS,
            sphere_k: DEFAULT_SPHERE_K,
            face_fraction: 1.0 / 3.0,
            min_face_height: MIN_FACE_HEIGHT,
            attack: AttackConfig::default(),
            adversarial_scope: AdversarialScope::Image,
            parallel: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Validation(m.to_string()));
        if self.dilation_radius == Some(0) || self.dilation_iterations == 0 {
            return bad("dilation radius and iterations must be >= 1");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.sphere_k == 0 {
            return bad("sphere_k must be >= 1");
        }
        if !(self.face_fraction > 0.0 && self.face_fraction <= 1.0) {
            return bad("face_fraction must be in (0, 1]");
        }
        self.attack.validate()?;
        Ok(())
    }

    pub fn dilation_for(&self, bbox: &BoundingBox) -> u32 {
        self.dilation_radius.unwrap_or_else(|| raster::default_dilation_radius(bbox))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyInstance {
    pub body_id: String,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
    pub pose: Vec<Keypoint>,
    pub edge_map: Image,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyChoice {
    pub body_id: String,
    pub option: AnonymizationChoice,
}

#[derive(Debug, Clone)]
pub struct AnonymizationRequest {
    pub image: Image,
    pub choices: Vec<BodyChoice>,
    pub seed: u64,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BodyReport {
    pub body_id: String,
    pub option: AnonymizationChoice,
    pub bbox: BoundingBox,
    /// Manifold entry used as guide, for mask-based and identity removal.
    pub guide_id: Option<String>,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdversarialSummary {
    pub iterations_used: u32,
    pub final_max_objectness: f64,
    pub linf_used: f64,
}

#[derive(Debug, Clone)]
pub struct AnonymizationOutput {
    pub image: Image,
    pub warnings: Vec<String>,
    pub bodies: Vec<BodyReport>,
    /// Pixels filled by the merge call, if one was needed.
    pub merged_pixels: usize,
    pub adversarial: Option<AdversarialSummary>,
}

/// Result of one per-body pass: the full-size backend output and the pixels
/// it is allowed to write.
#[derive(Debug, Clone)]
pub struct BodyPass {
    pub patch: Image,
    pub region: BinaryMask,
    pub guide: Option<(String, Embedding)>,
    pub pose_map: Option<Image>,
    pub warnings: Vec<String>,
}

impl BodyPass {
    pub fn apply(&self, image: &Image, feather: u32) -> Result<Image, RasterError> {
        raster::composite_feathered(image, &self.patch, &self.region, feather)
    }
}

/// A mask-based generation call, before it is sent.
#[derive(Debug, Clone)]
pub struct PreparedGeneration {
    pub request: GenerationRequest,
    pub guide_id: String,
    pub warnings: Vec<String>,
}

#[derive(Clone)]
pub struct Pipeline {
    backends: Backends,
    bodies: Option<Arc<BodyManifold>>,
    faces: Option<Arc<BodyManifold>>,
    config: PipelineConfig,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("backends", &self.backends)
            .field("body_manifold", &self.bodies.as_ref().map(|m| m.len()))
            .field("face_manifold", &self.faces.as_ref().map(|m| m.len()))
            .finish()
    }
}

impl Pipeline {
    pub fn new(backends: Backends) -> Self {
        Self { backends, bodies: None, faces: None, config: PipelineConfig::default() }
    }

    pub fn with_body_manifold(mut self, m: Arc<BodyManifold>) -> Self {
        self.bodies = Some(m);
        self
    }

    pub fn with_face_manifold(mut self, m: Arc<BodyManifold>) -> Self {
        self.faces = Some(m);
        self
    }

    /// Config used by the single-body entry points.
    pub fn with_config(mut self, config: PipelineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn detect_bodies(&self, image: &Image) -> Result<Vec<BodyInstance>, PipelineError> {
        let segmented = self.backends.segment(image)?;
        if segmented.is_empty() {
            return Ok(Vec::new());
        }
        let edges = self.backends.edges(image)?;
        let mut out: Vec<BodyInstance> = Vec::with_capacity(segmented.len());
        for body in segmented {
            if body.mask.is_empty() {
                continue;
            }
            let body_id = mask_id(&body.mask);
            if out.iter().any(|b| b.body_id == body_id) {
                continue;
            }
            let pose = self.backends.pose(image, body.bbox)?;
            out.push(BodyInstance {
                body_id,
                edge_map: restrict_to_box(&edges, body.bbox),
                mask: body.mask,
                bbox: body.bbox,
                pose,
                confidence: body.confidence,
            });
        }
        out.sort_by(|a, b| (a.bbox.x, a.bbox.y, &a.body_id).cmp(&(b.bbox.x, b.bbox.y, &b.body_id)));
        Ok(out)
    }

    fn body_region(&self, cfg: &PipelineConfig, body: &BodyInstance) -> Result<BinaryMask, PipelineError> {
        Ok(raster::dilate(&body.mask, cfg.dilation_for(&body.bbox), cfg.dilation_iterations)?)
    }

    pub fn run_physical(&self, image: &Image, body: &BodyInstance, seed: u64) -> Result<Image, PipelineError> {
        let region = self.body_region(&self.config, body)?;
        let pass = self.physical_pass(&self.config, image, &region, seed)?;
        Ok(pass.apply(image, self.config.feather)?)
    }

    fn physical_pass(
        &self,
        cfg: &PipelineConfig,
        image: &Image,
        region: &BinaryMask,
        seed: u64,
    ) -> Result<BodyPass, PipelineError> {
        let patch = self.backends.inpaint(InpaintRequest {
            image: raster::zero_masked(image, region)?,
            mask: region.clone(),
            steps: cfg.steps,
            seed,
        })?;
        Ok(BodyPass { patch, region: region.clone(), guide: None, pose_map: None, warnings: Vec::new() })
    }

    pub fn run_adversarial(
        &self,
        image: &Image,
        bodies: &[BodyInstance],
        cfg: &AttackConfig,
    ) -> Result<AdversarialResult, PipelineError> {
        self.run_adversarial_within(image, bodies, cfg, None)
    }

    /// Attack limited to `support` (all pixels when `None`).
    pub fn run_adversarial_within(
        &self,
        image: &Image,
        bodies: &[BodyInstance],
        cfg: &AttackConfig,
        support: Option<&BinaryMask>,
    ) -> Result<AdversarialResult, PipelineError> {
        let targets: Vec<BoundingBox> = bodies.iter().map(|b| b.bbox).collect();
        Ok(vanish_attack_targeted(image, &self.backends, cfg, support, &targets)?)
    }

    /// Builds the generation request for one body without sending it.
    pub fn prepare_generation(
        &self,
        image: &Image,
        body: &BodyInstance,
        manifold: &BodyManifold,
        seed: u64,
    ) -> Result<PreparedGeneration, PipelineError> {
        let region = self.body_region(&self.config, body)?;
        self.prepare_generation_in(&self.config, image, body, &region, manifold, seed)
    }

    fn prepare_generation_in(
        &self,
        cfg: &PipelineConfig,
        image: &Image,
        body: &BodyInstance,
        region: &BinaryMask,
        manifold: &BodyManifold,
        seed: u64,
    ) -> Result<PreparedGeneration, PipelineError> {
        let embedded = self.backends.embed(&raster::crop(image, body.bbox)?)?;
        let mut warnings = Vec::new();
        let guide = match manifold.select_guide(&embedded.embedding, &embedded.activity) {
            Ok(g) => g,
            Err(ManifoldError::UnknownActivity(activity)) => {
                warnings.push(format!(
                    "body {}: activity {activity:?} not in manifold, using global farthest guide",
                    body.body_id
                ));
                manifold.select_global_farthest(&embedded.embedding)?
            }
            Err(e) => return Err(e.into()),
        };
        let request = GenerationRequest {
            masked_image: raster::zero_masked(image, region)?,
            mask: region.clone(),
            pose_map: render_pose_map(image.width(), image.height(), &body.pose),
            edge_map: body.edge_map.clone(),
            guide_embedding: guide.embedding.clone(),
            steps: cfg.steps,
            seed,
        };
        Ok(PreparedGeneration { request, guide_id: guide.id.clone(), warnings })
    }

    pub fn run_mask_based(
        &self,
        image: &Image,
        body: &BodyInstance,
        manifold: &BodyManifold,
        seed: u64,
    ) -> Result<(Image, Vec<String>), PipelineError> {
        let region = self.body_region(&self.config, body)?;
        let pass = self.mask_based_pass(&self.config, image, body, &region, manifold, seed)?;
        Ok((pass.apply(image, self.config.feather)?, pass.warnings))
    }

    fn mask_based_pass(
        &self,
        cfg: &PipelineConfig,
        image: &Image,
        body: &BodyInstance,
        region: &BinaryMask,
        manifold: &BodyManifold,
        seed: u64,
    ) -> Result<BodyPass, PipelineError> {
        let prepared = self.prepare_generation_in(cfg, image, body, region, manifold, seed)?;
        let patch = self.backends.generate(&prepared.request)?;
        Ok(BodyPass {
            patch,
            region: region.clone(),
            guide: Some((prepared.guide_id, prepared.request.guide_embedding)),
            pose_map: Some(prepared.request.pose_map),
            warnings: prepared.warnings,
        })
    }

    /// Upper part of the body box used as the face region, or `None` when the
    /// body is too short to hold a face.
    pub fn face_box(cfg: &PipelineConfig, bbox: &BoundingBox) -> Option<BoundingBox> {
        if bbox.h < cfg.min_face_height {
            return None;
        }
        let h = ((bbox.h as f64 * cfg.face_fraction).ceil() as u32).clamp(1, bbox.h);
        Some(BoundingBox::new(bbox.x, bbox.y, bbox.w, h))
    }

    pub fn run_identity(
        &self,
        image: &Image,
        body: &BodyInstance,
        faces: &BodyManifold,
        sphere_k: usize,
        seed: u64,
    ) -> Result<(Image, Vec<String>), PipelineError> {
        let cfg = PipelineConfig { sphere_k, ..self.config.clone() };
        match self.identity_pass(&cfg, image, body, None, faces, seed)? {
            Some(pass) => Ok((pass.apply(image, 0)?, pass.warnings)),
            None => Ok((image.clone(), vec![face_skip_warning(body)])),
        }
    }

    fn identity_pass(
        &self,
        cfg: &PipelineConfig,
        image: &Image,
        body: &BodyInstance,
        protected: Option<&BinaryMask>,
        faces: &BodyManifold,
        seed: u64,
    ) -> Result<Option<BodyPass>, PipelineError> {
        let Some(face) = Self::face_box(cfg, &body.bbox) else {
            return Ok(None);
        };
        let embedded = self.backends.embed(&raster::crop(image, face)?)?;
        let guide = faces.select_face_guide(&embedded.embedding, cfg.sphere_k, seed)?;
        let swapped = self.backends.faceswap(FaceswapRequest {
            image: image.clone(),
            bbox: face,
            guide_embedding: guide.embedding.clone(),
            seed,
        })?;
        let patch = self.backends.enhance(EnhanceRequest { image: swapped, bbox: face, seed })?;
        let mut region = BinaryMask::from_rect(image.width(), image.height(), face)?;
        if let Some(p) = protected {
            region = region.and_not(p)?;
        }
        Ok(Some(BodyPass {
            patch,
            region,
            guide: Some((guide.id.clone(), guide.embedding.clone())),
            pose_map: None,
            warnings: Vec::new(),
        }))
    }

    pub fn anonymize(&self, request: &AnonymizationRequest) -> Result<AnonymizationOutput, PipelineError> {
        let cfg = &request.config;
        cfg.validate()?;
        let image = &request.image;
        let bodies = self.detect_bodies(image)?;
        let assigned = assign_choices(&bodies, &request.choices)?;
        let mut reports: Vec<BodyReport> = assigned
            .iter()
            .map(|(b, c)| BodyReport { body_id: b.body_id.clone(), option: *c, bbox: b.bbox, guide_id: None, skipped: false })
            .collect();
        let mut output = AnonymizationOutput {
            image: image.clone(),
            warnings: Vec::new(),
            bodies: Vec::new(),
            merged_pixels: 0,
            adversarial: None,
        };
        if assigned.iter().all(|(_, c)| *c == AnonymizationChoice::NoAction) {
            output.bodies = reports;
            return Ok(output);
        }
        let needs = |c: AnonymizationChoice| assigned.iter().any(|(_, x)| *x == c);
        if needs(AnonymizationChoice::MaskBasedRemoval) && self.bodies.is_none() {
            return Err(PipelineError::MissingManifold("body"));
        }
        if needs(AnonymizationChoice::IdentityRemoval) && self.faces.is_none() {
            return Err(PipelineError::MissingManifold("face"));
        }

        let (w, h) = image.dims();
        let acting: Vec<&BinaryMask> = assigned
            .iter()
            .filter(|(_, c)| *c != AnonymizationChoice::NoAction)
            .map(|(b, _)| &b.mask)
            .collect();
        let mut protected = BinaryMask::empty(w, h);
        for (b, c) in &assigned {
            if *c == AnonymizationChoice::NoAction {
                protected = raster::union_masks(&[protected, b.mask.clone()])?;
            }
        }
        for m in &acting {
            protected = protected.and_not(m)?;
        }

        // Per-body passes, each against the original image.
        let jobs: Vec<usize> = (0..assigned.len())
            .filter(|&i| {
                matches!(
                    assigned[i].1,
                    AnonymizationChoice::PhysicalRemoval
                        | AnonymizationChoice::MaskBasedRemoval
                        | AnonymizationChoice::IdentityRemoval
                )
            })
            .collect();
        let run_one = |&i: &usize| -> Result<(usize, Option<BodyPass>), PipelineError> {
            let (body, choice) = assigned[i];
            let seed = derive_seed(request.seed, &body.body_id);
            let pass = match choice {
                AnonymizationChoice::PhysicalRemoval => {
                    let region = self.body_region(cfg, body)?.and_not(&protected)?;
                    Some(self.physical_pass(cfg, image, &region, seed)?)
                }
                AnonymizationChoice::MaskBasedRemoval => {
                    let region = self.body_region(cfg, body)?.and_not(&protected)?;
                    let m = self.bodies.as_deref().expect("checked above");
                    Some(self.mask_based_pass(cfg, image, body, &region, m, seed)?)
                }
                AnonymizationChoice::IdentityRemoval => {
                    let m = self.faces.as_deref().expect("checked above");
                    self.identity_pass(cfg, image, body, Some(&protected), m, seed)?
                }
                _ => unreachable!("filtered"),
            };
            Ok((i, pass))
        };
        let results: Vec<(usize, Option<BodyPass>)> = if cfg.parallel {
            jobs.par_iter().map(run_one).collect::<Result<_, _>>()?
        } else {
            jobs.iter().map(run_one).collect::<Result<_, _>>()?
        };

        let mut passes: Vec<(usize, BodyPass)> = Vec::new();
        for (i, pass) in results {
            match pass {
                Some(p) => {
                    output.warnings.extend(p.warnings.iter().cloned());
                    reports[i].guide_id = p.guide.as_ref().map(|g| g.0.clone());
                    passes.push((i, p));
                }
                None => {
                    reports[i].skipped = true;
                    output.warnings.push(face_skip_warning(assigned[i].0));
                }
            }
        }

        // Single-owner pixels first, then one merge call over the overlaps.
        let mut owners = vec![0u32; (w * h) as usize];
        for (_, p) in &passes {
            for (o, &set) in owners.iter_mut().zip(p.region.bits()) {
                *o += set as u32;
            }
        }
        let overlap = BinaryMask::from_bits(w, h, owners.iter().map(|&o| o > 1).collect())?;
        let mut current = image.clone();
        for (_, p) in &passes {
            let own = p.region.and_not(&overlap)?;
            current = raster::composite_feathered(&current, &p.patch, &own, cfg.feather)?;
        }
        if !overlap.is_empty() {
            let involved: Vec<&(usize, BodyPass)> =
                passes.iter().filter(|(_, p)| p.region.and(&overlap).map(|m| !m.is_empty()).unwrap_or(false)).collect();
            let merged = self.merge(cfg, &current, &overlap, &involved, &assigned, request.seed)?;
            current = raster::composite(&current, &merged, &overlap)?;
            output.merged_pixels = overlap.count();
        }

        // Adversarial last, on top of everything else.
        let adversarial: Vec<BodyInstance> = assigned
            .iter()
            .filter(|(_, c)| *c == AnonymizationChoice::AdversarialRemoval)
            .map(|(b, _)| (*b).clone())
            .collect();
        if !adversarial.is_empty() {
            let support = match cfg.adversarial_scope {
                AdversarialScope::Image => BinaryMask::full(w, h).and_not(&protected)?,
                AdversarialScope::Bodies => {
                    let mut s = BinaryMask::empty(w, h);
                    for b in &adversarial {
                        s = raster::union_masks(&[s, self.body_region(cfg, b)?])?;
                    }
                    s.and_not(&protected)?
                }
            };
            let result = self.run_adversarial_within(&current, &adversarial, &cfg.attack, Some(&support))?;
            if result.final_max_objectness >= cfg.attack.stop_threshold {
                output.warnings.push(format!(
                    "adversarial removal incomplete: max objectness {:.3} after {} iterations",
                    result.final_max_objectness, result.iterations_used
                ));
            }
            output.adversarial = Some(AdversarialSummary {
                iterations_used: result.iterations_used,
                final_max_objectness: result.final_max_objectness,
                linf_used: result.linf_used,
            });
            current = result.image;
        }

        output.image = current;
        output.bodies = reports;
        Ok(output)
    }

    fn merge(
        &self,
        cfg: &PipelineConfig,
        base: &Image,
        overlap: &BinaryMask,
        involved: &[&(usize, BodyPass)],
        assigned: &[(&BodyInstance, AnonymizationChoice)],
        seed: u64,
    ) -> Result<Image, PipelineError> {
        let seed = derive_seed(seed, "merge");
        let masked = raster::zero_masked(base, overlap)?;
        let generative: Vec<&(usize, BodyPass)> = involved
            .iter()
            .copied()
            .filter(|(i, _)| assigned[*i].1 == AnonymizationChoice::MaskBasedRemoval)
            .collect();
        if generative.is_empty() {
            return Ok(self.backends.inpaint(InpaintRequest { image: masked, mask: overlap.clone(), steps: cfg.steps, seed })?);
        }
        let dim = generative[0].1.guide.as_ref().expect("mask-based pass has a guide").1.dim();
        let mut sum = vec![0f32; dim];
        let mut pose = Image::new(base.width(), base.height())?;
        let mut edges = Image::new(base.width(), base.height())?;
        for (i, p) in &generative {
            for (s, v) in sum.iter_mut().zip(p.guide.as_ref().expect("guide").1.as_slice()) {
                *s += v;
            }
            if let Some(pm) = &p.pose_map {
                max_into(&mut pose, pm);
            }
            max_into(&mut edges, &assigned[*i].0.edge_map);
        }
        let guide_embedding = match Embedding::normalized(sum) {
            Ok(e) => e,
            // opposite guides cancel: fall back to the first one
            Err(_) => generative[0].1.guide.as_ref().expect("guide").1.clone(),
        };
        let request = GenerationRequest {
            masked_image: masked,
            mask: overlap.clone(),
            pose_map: pose,
            edge_map: edges,
            guide_embedding,
            steps: cfg.steps,
            seed,
        };
        Ok(self.backends.generate(&request)?)
    }
}

fn face_skip_warning(body: &BodyInstance) -> String {
    format!("body {}: bbox height {} too small for a face region, skipped", body.body_id, body.bbox.h)
}

fn max_into(acc: &mut Image, other: &Image) {
    for (a, b) in acc.as_bytes_mut().iter_mut().zip(other.as_bytes()) {
        *a = (*a).max(*b);
    }
}

/// Pairs each detected body (canonical order) with its option; bodies not
/// mentioned get NoAction. Repeating an identical choice is allowed.
pub fn assign_choices<'a>(
    bodies: &'a [BodyInstance],
    choices: &[BodyChoice],
) -> Result<Vec<(&'a BodyInstance, AnonymizationChoice)>, PipelineError> {
    let mut chosen: BTreeMap<&str, AnonymizationChoice> = BTreeMap::new();
    for c in choices {
        if !bodies.iter().any(|b| b.body_id == c.body_id) {
            return Err(PipelineError::UnknownBody(c.body_id.clone()));
        }
        if let Some(prev) = chosen.insert(&c.body_id, c.option) {
            if prev != c.option {
                return Err(PipelineError::ConflictingChoice {
                    body_id: c.body_id.clone(),
                    first: prev,
                    second: c.option,
                });
            }
        }
    }
    Ok(bodies
        .iter()
        .map(|b| (b, chosen.get(b.body_id.as_str()).copied().unwrap_or(AnonymizationChoice::NoAction)))
        .collect())
}

/// Content hash of a mask: first 16 hex digits of SHA-256 over its
/// dimensions and bits.
pub fn mask_id(mask: &BinaryMask) -> String {
    let mut h = Sha256::new();
    h.update(mask.width().to_le_bytes());
    h.update(mask.height().to_le_bytes());
    let packed: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
    h.update(&packed);
    hex::encode(&h.finalize()[..8])
}

/// Per-body seed, independent of processing order.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// COCO-18 limb pairs in the usual skeleton drawing order.
const LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

const COLORS: [[u8; 3]; 18] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
    [255, 0, 170],
    [255, 0, 85],
];

const KEYPOINT_MIN_CONFIDENCE: f64 = 0.1;
const LIMB_HALF_WIDTH: f64 = 2.0;
const JOINT_RADIUS: f64 = 3.0;

/// Draws the skeleton on black: limbs as thick segments, joints as discs.
/// Keypoints below 0.1 confidence are skipped.
pub fn render_pose_map(width: u32, height: u32, keypoints: &[Keypoint]) -> Image {
    let mut out = Image::new(width, height).expect("non-empty image");
    let visible = |i: usize| keypoints.get(i).filter(|k| k.confidence >= KEYPOINT_MIN_CONFIDENCE);
    for (li, &(a, b)) in LIMBS.iter().enumerate() {
        if let (Some(p), Some(q)) = (visible(a), visible(b)) {
            draw_segment(&mut out, (p.x, p.y), (q.x, q.y), LIMB_HALF_WIDTH, COLORS[li]);
        }
    }
    for (i, k) in keypoints.iter().enumerate().take(COLORS.len()) {
        if k.confidence >= KEYPOINT_MIN_CONFIDENCE {
            draw_segment(&mut out, (k.x, k.y), (k.x, k.y), JOINT_RADIUS, COLORS[i]);
        }
    }
    out
}

fn draw_segment(img: &mut Image, p: (f64, f64), q: (f64, f64), radius: f64, color: [u8; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (p.0.min(q.0) - radius).floor().max(0.0);
    let x1 = (p.0.max(q.0) + radius).ceil().min(w - 1.0);
    let y0 = (p.1.min(q.1) - radius).floor().max(0.0);
    let y1 = (p.1.max(q.1) + radius).ceil().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let (dx, dy) = (q.0 - p.0, q.1 - p.1);
    let len2 = dx * dx + dy * dy;
    for y in y0 as u32..=y1 as u32 {
        for x in x0 as u32..=x1 as u32 {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 == 0.0 { 0.0 } else { (((cx - p.0) * dx + (cy - p.1) * dy) / len2).clamp(0.0, 1.0) };
            let (ex, ey) = (p.0 + t * dx - cx, p.1 + t * dy - cy);
            if ex * ex + ey * ey <= radius * radius {
                img.put(x, y, color);
            }
        }
    }
}
