//! Objectness-vanishing attack against a differentiable person detector.
//!
//! Iterated sign-gradient descent on the detector's summed person objectness,
//! projected onto an L∞ ball around the original image and onto the valid
//! pixel range. The working image is re-quantized to 8 bits before every
//! detector call, so the detector always scores exactly what is returned.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendError;
use crate::raster::{BinaryMask, BoundingBox, Image};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("detector returned a gradient of length {got}, expected {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

/// Person detector the attack can query.
pub trait Detector: Send + Sync {
    fn detect(&self, image: &Image) -> Result<Vec<Detection>, BackendError>;

    /// Gradient of total person objectness with respect to pixels scaled to
    /// `[0, 1]`; row-major, channel-interleaved, `width * height * 3` values.
    fn objectness_grad(&self, image: &Image) -> Result<Vec<f32>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// L∞ budget in `[0, 1]` pixel units.
    pub epsilon: f64,
    pub alpha: f64,
    pub max_iters: u32,
    /// Detections below this objectness count as suppressed.
    pub stop_threshold: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epsilon: 8.0 / 255.0, alpha: 1.0 / 255.0, max_iters: 200, stop_threshold: 0.25 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(AttackError::InvalidConfig(format!(
                "need 0 < alpha <= epsilon, got alpha={} epsilon={}",
                self.alpha, self.epsilon
            )));
        }
        if self.epsilon > 1.0 {
            return Err(AttackError::InvalidConfig("epsilon must be <= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(AttackError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold <= 1.0) {
            return Err(AttackError::InvalidConfig("stop_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Budget expressed in whole 8-bit levels.
    pub fn budget_levels(&self) -> i32 {
        (self.epsilon * 255.0 + 1e-9).floor() as i32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialResult {
    pub image: Image,
    pub iterations_used: u32,
    pub final_max_objectness: f64,
    pub linf_used: f64,
}

/// Attack every detection in the image. With `target_region`, the
/// perturbation is confined to its set pixels and only detections touching
/// it count toward the stop criterion.
pub fn vanish_attack(
    image: &Image,
    detector: &dyn Detector,
    cfg: &AttackConfig,
    target_region: Option<&BinaryMask>,
) -> Result<AdversarialResult, AttackError> {
    run(image, detector, cfg, target_region, None)
}

/// Like [`vanish_attack`], but the stop criterion only looks at detections
/// matching one of `targets` (see [`matches_target`]).
pub fn vanish_attack_targeted(
    image: &Image,
    detector: &dyn Detector,
    cfg: &AttackConfig,
    target_region: Option<&BinaryMask>,
    targets: &[BoundingBox],
) -> Result<AdversarialResult, AttackError> {
    if targets.is_empty() {
        return Err(AttackError::InvalidArgument("no target bodies".into()));
    }
    run(image, detector, cfg, target_region, Some(targets))
}

pub const TARGET_IOU: f64 = 0.5;

/// IoU above 0.5, or more than half of either box inside the other (a
/// fragment of the body, or one detection spanning several people).
pub fn matches_target(det: &BoundingBox, target: &BoundingBox) -> bool {
    if det.iou(target) > TARGET_IOU {
        return true;
    }
    let inter = det.intersection_area(target) as f64;
    let covers = |b: &BoundingBox| b.area() > 0 && inter / b.area() as f64 > TARGET_IOU;
    covers(det) || covers(target)
}

fn run(
    image: &Image,
    detector: &dyn Detector,
    cfg: &AttackConfig,
    region: Option<&BinaryMask>,
    targets: Option<&[BoundingBox]>,
) -> Result<AdversarialResult, AttackError> {
    cfg.validate()?;
    if let Some(r) = region {
        if r.dims() != image.dims() {
            return Err(AttackError::InvalidArgument(format!(
                "target region {:?} does not match image {:?}",
                r.dims(),
                image.dims()
            )));
        }
    }
    let relevant = |d: &Detection| match (targets, region) {
        (Some(ts), _) => ts.iter().any(|t| matches_target(&d.bbox, t)),
        (None, Some(r)) => touches(&d.bbox, r),
        (None, None) => true,
    };
    let max_objectness = |dets: &[Detection]| {
        dets.iter().filter(|d| relevant(d)).map(|d| d.objectness).fold(0.0f64, f64::max)
    };

    let original = image.as_bytes();
    let mut objectness = max_objectness(&detector.detect(image)?);
    if objectness < cfg.stop_threshold {
        return Ok(AdversarialResult {
            image: image.clone(),
            iterations_used: 0,
            final_max_objectness: objectness,
            linf_used: 0.0,
        });
    }

    let budget = cfg.budget_levels();
    let n = original.len();
    let allowed: Vec<bool> = match region {
        Some(r) => r.bits().iter().flat_map(|&b| [b; 3]).collect(),
        None => vec![true; n],
    };
    let mut working: Vec<f64> = original.iter().map(|&p| p as f64 / 255.0).collect();
    let mut current = image.clone();
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let grad = detector.objectness_grad(&current)?;
        if grad.len() != n {
            return Err(AttackError::GradientShape { expected: n, got: grad.len() });
        }
        let bytes = current.as_bytes_mut();
        for i in 0..n {
            if !allowed[i] {
                continue;
            }
            let base = original[i] as f64 / 255.0;
            let step = working[i] - cfg.alpha * sign(grad[i]);
            working[i] = step.clamp(base - cfg.epsilon, base + cfg.epsilon).clamp(0.0, 1.0);
            let lo = (original[i] as i32 - budget).max(0);
            let hi = (original[i] as i32 + budget).min(255);
            bytes[i] = ((working[i] * 255.0).round() as i32).clamp(lo, hi) as u8;
        }
        objectness = max_objectness(&detector.detect(&current)?);
        if objectness < cfg.stop_threshold {
            break;
        }
    }
    let linf_levels = current
        .as_bytes()
        .iter()
        .zip(original)
        .map(|(&a, &b)| (a as i32 - b as i32).abs())
        .max()
        .unwrap_or(0);
    Ok(AdversarialResult {
        image: current,
        iterations_used: iterations,
        final_max_objectness: objectness,
        linf_used: linf_levels as f64 / 255.0,
    })
}

fn sign(v: f32) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn touches(bbox: &BoundingBox, mask: &BinaryMask) -> bool {
    let x_end = (bbox.x + bbox.w).min(mask.width());
    let y_end = (bbox.y + bbox.h).min(mask.height());
    (bbox.y..y_end).any(|y| (bbox.x..x_end).any(|x| mask.get(x, y)))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Single-output logistic detector `σ(w·x + b)` over the whole image, with
/// `x` the channel-interleaved pixels scaled to `[0, 1]`. Always reports one
/// whole-image detection.
#[derive(Debug, Clone)]
pub struct LogisticDetector {
    pub width: u32,
    pub height: u32,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticDetector {
    pub fn logit(&self, image: &Image) -> f64 {
        self.bias
            + image
                .as_bytes()
                .iter()
                .zip(&self.weights)
                .map(|(&p, &w)| w * p as f64 / 255.0)
                .sum::<f64>()
    }

    fn check(&self, image: &Image) -> Result<(), BackendError> {
        if image.dims() != (self.width, self.height) || self.weights.len() != image.as_bytes().len() {
            return Err(BackendError::Protocol {
                role: "detect".into(),
                detail: format!("logistic detector expects {}x{}", self.width, self.height),
            });
        }
        Ok(())
    }
}

impl Detector for LogisticDetector {
    fn detect(&self, image: &Image) -> Result<Vec<Detection>, BackendError> {
        self.check(image)?;
        Ok(vec![Detection {
            bbox: BoundingBox::new(0, 0, self.width, self.height),
            objectness: sigmoid(self.logit(image)),
        }])
    }

    fn objectness_grad(&self, image: &Image) -> Result<Vec<f32>, BackendError> {
        self.check(image)?;
        let s = sigmoid(self.logit(image));
        let scale = s * (1.0 - s);
        Ok(self.weights.iter().map(|&w| (scale * w) as f32).collect())
    }
}
