//! Deterministic stand-ins for every backend role.
//!
//! Each answer is a pure function of `(mock seed, request)`:
//!
//! - segment: 4-connected components of pixels with HSV saturation above 0.5
//!   (components smaller than [`MOCK_MIN_BODY_AREA`] are dropped)
//! - pose: 18 keypoints on a 3×6 grid inside the box
//! - edges: thresholded Sobel magnitude of the luma, white on black
//! - embed: unit vector drawn from a generator keyed by a hash of the pixels;
//!   activity `mock-activity-{hash mod 4}`
//! - inpaint / generate: masked pixels replaced by low-saturation noise keyed
//!   by the request digest
//! - faceswap / enhance: keyed per-channel remap inside the box
//! - detect: [`MockDetector`]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::wire::*;
use super::{Backend, BackendError, BackendRole};
use crate::attack::{sigmoid, Detection, Detector};
use crate::manifold::Embedding;
use crate::raster::{BinaryMask, BoundingBox, Image};

pub const MOCK_MIN_BODY_AREA: usize = 16;
const SATURATION_THRESHOLD: f64 = 0.5;
const SOBEL_THRESHOLD: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    dim: usize,
    detector: MockDetector,
}

impl MockBackend {
    pub fn new(seed: u64, embedding_dim: usize) -> Self {
        Self { seed, dim: embedding_dim.max(1), detector: MockDetector::new(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn hasher(&self, tag: &str) -> KeyedHasher {
        let mut h = KeyedHasher::new(self.seed);
        h.bytes(tag.as_bytes());
        h
    }

    fn segment(&self, image: &Image) -> SegmentResponse {
        let (w, h) = image.dims();
        let sat: Vec<f64> = image.as_bytes().chunks_exact(3).map(saturation).collect();
        let mut label = vec![usize::MAX; sat.len()];
        let mut bodies = Vec::new();
        let mut stack = Vec::new();
        for start in 0..sat.len() {
            if label[start] != usize::MAX || sat[start] <= SATURATION_THRESHOLD {
                continue;
            }
            let id = start;
            label[start] = id;
            stack.push(start);
            let mut members = Vec::new();
            while let Some(i) = stack.pop() {
                members.push(i);
                let (x, y) = ((i % w as usize) as i64, (i / w as usize) as i64);
                for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w as usize + nx as usize;
                    if label[j] == usize::MAX && sat[j] > SATURATION_THRESHOLD {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
            if members.len() < MOCK_MIN_BODY_AREA {
                continue;
            }
            let mut mask = BinaryMask::empty(w, h);
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            let mut sat_sum = 0.0;
            for &i in &members {
                let (x, y) = ((i % w as usize) as u32, (i / w as usize) as u32);
                mask.set(x, y, true);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                sat_sum += sat[i];
            }
            bodies.push(SegmentedBody {
                mask,
                bbox: BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                confidence: sat_sum / members.len() as f64,
            });
        }
        SegmentResponse { bodies }
    }

    fn pose(&self, bbox: BoundingBox) -> PoseResponse {
        let keypoints = (0..KEYPOINT_COUNT)
            .map(|i| {
                let (col, row) = ((i % 3) as f64, (i / 3) as f64);
                Keypoint {
                    x: bbox.x as f64 + (2.0 * col + 1.0) * bbox.w as f64 / 6.0,
                    y: bbox.y as f64 + (2.0 * row + 1.0) * bbox.h as f64 / 12.0,
                    confidence: 1.0,
                }
            })
            .collect();
        PoseResponse { keypoints }
    }

    fn edges(&self, image: &Image) -> EdgesResponse {
        let (w, h) = (image.width() as i64, image.height() as i64);
        let luma: Vec<f64> = image
            .as_bytes()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        let at = |x: i64, y: i64| luma[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
        let mut out = Image::new(image.width(), image.height()).expect("non-empty");
        for y in 0..h {
            for x in 0..w {
                let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                    - at(x - 1, y - 1)
                    - 2.0 * at(x - 1, y)
                    - at(x - 1, y + 1);
                let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                    - at(x - 1, y - 1)
                    - 2.0 * at(x, y - 1)
                    - at(x + 1, y - 1);
                if (gx * gx + gy * gy).sqrt() > SOBEL_THRESHOLD {
                    out.put(x as u32, y as u32, [255, 255, 255]);
                }
            }
        }
        EdgesResponse { edge_map: out }
    }

    fn embed(&self, image: &Image) -> EmbedResponse {
        let mut h = self.hasher("embed");
        h.image(image);
        let digest = h.finish();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let values: Vec<f32> = (0..self.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 4;
        EmbedResponse {
            embedding: Embedding::normalized(values).expect("non-zero with overwhelming probability"),
            activity: format!("mock-activity-{bucket}"),
        }
    }

    fn fill_texture(&self, image: &Image, mask: &BinaryMask, digest: [u8; 32]) -> Image {
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut out = image.clone();
        for y in 0..image.height() {
            for x in 0..image.width() {
                if mask.get(x, y) {
                    let g: i32 = rng.random_range(60..=200);
                    let px = [0, 1, 2].map(|_| (g + rng.random_range(-10..=10)) as u8);
                    out.put(x, y, px);
                }
            }
        }
        out
    }

    fn inpaint(&self, req: &InpaintRequest) -> Result<ImageResponse, BackendError> {
        if req.mask.dims() != req.image.dims() {
            return Err(BackendError::bad_request(BackendRole::Inpaint, "mask and image dimensions differ"));
        }
        let mut h = self.hasher("inpaint");
        h.image(&req.image);
        h.mask(&req.mask);
        h.u64(req.steps as u64);
        h.u64(req.seed);
        Ok(ImageResponse { image: self.fill_texture(&req.image, &req.mask, h.finish()) })
    }

    fn generate(&self, req: &GenerationRequest) -> Result<ImageResponse, BackendError> {
        req.validate().map_err(|e| BackendError::bad_request(BackendRole::Generate, e))?;
        let mut h = self.hasher("generate");
        h.image(&req.masked_image);
        h.mask(&req.mask);
        h.image(&req.pose_map);
        h.image(&req.edge_map);
        for v in req.guide_embedding.as_slice() {
            h.bytes(&v.to_le_bytes());
        }
        h.u64(req.steps as u64);
        h.u64(req.seed);
        Ok(ImageResponse { image: self.fill_texture(&req.masked_image, &req.mask, h.finish()) })
    }

    fn remap(&self, role: BackendRole, image: &Image, bbox: BoundingBox, key: [u8; 32]) -> Result<ImageResponse, BackendError> {
        bbox.check_inside(image.width(), image.height())
            .map_err(|e| BackendError::bad_request(role, e.to_string()))?;
        let mut out = image.clone();
        for y in bbox.y..bbox.y + bbox.h {
            for x in bbox.x..bbox.x + bbox.w {
                let p = image.get(x, y);
                let q = match role {
                    BackendRole::Faceswap => [0, 1, 2].map(|c| p[c] ^ (key[c] | 1)),
                    _ => [0, 1, 2].map(|c| p[c].wrapping_add(1 + key[c] % 254)),
                };
                out.put(x, y, q);
            }
        }
        Ok(ImageResponse { image: out })
    }

    fn faceswap(&self, req: &FaceswapRequest) -> Result<ImageResponse, BackendError> {
        let mut h = self.hasher("faceswap");
        h.image(&req.image);
        h.bbox(req.bbox);
        for v in req.guide_embedding.as_slice() {
            h.bytes(&v.to_le_bytes());
        }
        h.u64(req.seed);
        self.remap(BackendRole::Faceswap, &req.image, req.bbox, h.finish())
    }

    fn enhance(&self, req: &EnhanceRequest) -> Result<ImageResponse, BackendError> {
        let mut h = self.hasher("enhance");
        h.image(&req.image);
        h.bbox(req.bbox);
        h.u64(req.seed);
        self.remap(BackendRole::Enhance, &req.image, req.bbox, h.finish())
    }
}

impl Backend for MockBackend {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        Ok(match request {
            BackendRequest::Segment(r) => BackendResponse::Segment(self.segment(&r.image)),
            BackendRequest::Pose(r) => {
                r.bbox
                    .check_inside(r.image.width(), r.image.height())
                    .map_err(|e| BackendError::bad_request(BackendRole::Pose, e.to_string()))?;
                BackendResponse::Pose(self.pose(r.bbox))
            }
            BackendRequest::Edges(r) => BackendResponse::Edges(self.edges(&r.image)),
            BackendRequest::Embed(r) => BackendResponse::Embed(self.embed(&r.image)),
            BackendRequest::Inpaint(r) => BackendResponse::Image(self.inpaint(r)?),
            BackendRequest::Generate(r) => BackendResponse::Image(self.generate(r)?),
            BackendRequest::Faceswap(r) => BackendResponse::Image(self.faceswap(r)?),
            BackendRequest::Enhance(r) => BackendResponse::Image(self.enhance(r)?),
            BackendRequest::Detect(r) => BackendResponse::Detect(DetectResponse {
                detections: self
                    .detector
                    .detect(&r.image)?
                    .into_iter()
                    .map(|d| WireDetection { bbox: d.bbox, objectness: d.objectness })
                    .collect(),
            }),
            BackendRequest::DetectGrad(r) => {
                let grad = self.detector.objectness_grad(&r.image)?;
                BackendResponse::Grad(GradResponse::encode(&grad, r.image.width(), r.image.height()))
            }
        })
    }
}

/// Differentiable person detector over a grid of 8×8 cells.
///
/// Each cell's logit is
/// `bias + chroma_gain · mean(max_c − min_c) + Σ (W − mean W) · x`
/// where `W` is a fixed random ±0.4 template (seeded) and `x` holds pixels in
/// `[0, 1]`. The template is centered per cell and channel, so flat regions
/// get no response from it. Cells scoring at least 0.1 are merged into
/// 4-connected groups; each group is one detection (union box, max score).
#[derive(Debug, Clone)]
pub struct MockDetector {
    template: Vec<f64>,
}

impl MockDetector {
    pub const CELL: u32 = 8;
    pub const TEMPLATE_MAGNITUDE: f64 = 0.4;
    pub const CHROMA_GAIN: f64 = 6.0;
    pub const BIAS: f64 = -4.0;
    pub const REPORT_FLOOR: f64 = 0.1;

    pub fn new(seed: u64) -> Self {
        let mut h = KeyedHasher::new(seed);
        h.bytes(b"detector-template");
        let mut rng = ChaCha8Rng::from_seed(h.finish());
        let n = (Self::CELL * Self::CELL * 3) as usize;
        let template = (0..n)
            .map(|_| if rng.random::<bool>() { Self::TEMPLATE_MAGNITUDE } else { -Self::TEMPLATE_MAGNITUDE })
            .collect();
        Self { template }
    }

    fn cells(width: u32, height: u32) -> impl Iterator<Item = (u32, u32, BoundingBox)> {
        let cols = width.div_ceil(Self::CELL);
        let rows = height.div_ceil(Self::CELL);
        (0..rows).flat_map(move |cy| {
            (0..cols).map(move |cx| {
                let x = cx * Self::CELL;
                let y = cy * Self::CELL;
                (cx, cy, BoundingBox::new(x, y, Self::CELL.min(width - x), Self::CELL.min(height - y)))
            })
        })
    }

    fn tmpl(&self, lx: u32, ly: u32, c: usize) -> f64 {
        self.template[((ly * Self::CELL + lx) * 3) as usize + c]
    }

    fn centered_template(&self, cell: &BoundingBox) -> [f64; 3] {
        let mut mean = [0.0; 3];
        for ly in 0..cell.h {
            for lx in 0..cell.w {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += self.tmpl(lx, ly, c);
                }
            }
        }
        mean.map(|m| m / cell.area() as f64)
    }

    /// Logit of one cell.
    pub fn cell_logit(&self, image: &Image, cell: &BoundingBox) -> f64 {
        let mean_w = self.centered_template(cell);
        let mut chroma = 0.0;
        let mut template = 0.0;
        for ly in 0..cell.h {
            for lx in 0..cell.w {
                let p = image.get(cell.x + lx, cell.y + ly).map(|v| v as f64 / 255.0);
                chroma += p.iter().cloned().fold(f64::MIN, f64::max) - p.iter().cloned().fold(f64::MAX, f64::min);
                for c in 0..3 {
                    template += (self.tmpl(lx, ly, c) - mean_w[c]) * p[c];
                }
            }
        }
        Self::BIAS + Self::CHROMA_GAIN * chroma / cell.area() as f64 + template
    }

    pub fn cell_scores(&self, image: &Image) -> Vec<(u32, u32, BoundingBox, f64)> {
        Self::cells(image.width(), image.height())
            .map(|(cx, cy, cell)| (cx, cy, cell, sigmoid(self.cell_logit(image, &cell))))
            .collect()
    }
}

impl Detector for MockDetector {
    fn detect(&self, image: &Image) -> Result<Vec<Detection>, BackendError> {
        let cols = image.width().div_ceil(Self::CELL) as usize;
        let scores = self.cell_scores(image);
        let live: Vec<bool> = scores.iter().map(|s| s.3 >= Self::REPORT_FLOOR).collect();
        let mut seen = vec![false; scores.len()];
        let mut out = Vec::new();
        for start in 0..scores.len() {
            if !live[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            let mut best = 0.0f64;
            while let Some(i) = stack.pop() {
                let (_, _, b, s) = scores[i];
                x0 = x0.min(b.x);
                y0 = y0.min(b.y);
                x1 = x1.max(b.x + b.w);
                y1 = y1.max(b.y + b.h);
                best = best.max(s);
                let (cx, cy) = ((i % cols) as i64, (i / cols) as i64);
                let rows = (scores.len() / cols) as i64;
                for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (cx + dx, cy + dy);
                    if nx < 0 || ny < 0 || nx >= cols as i64 || ny >= rows {
                        continue;
                    }
                    let j = ny as usize * cols + nx as usize;
                    if live[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            out.push(Detection { bbox: BoundingBox::new(x0, y0, x1 - x0, y1 - y0), objectness: best });
        }
        Ok(out)
    }

    fn objectness_grad(&self, image: &Image) -> Result<Vec<f32>, BackendError> {
        let w = image.width();
        let mut grad = vec![0f32; image.as_bytes().len()];
        for (_, _, cell) in Self::cells(image.width(), image.height()) {
            let s = sigmoid(self.cell_logit(image, &cell));
            let ds = s * (1.0 - s);
            let mean_w = self.centered_template(&cell);
            let n = cell.area() as f64;
            for ly in 0..cell.h {
                for lx in 0..cell.w {
                    let (x, y) = (cell.x + lx, cell.y + ly);
                    let p = image.get(x, y);
                    let hi = (0..3).max_by_key(|&c| (p[c], std::cmp::Reverse(c))).expect("3 channels");
                    let lo = (0..3).min_by_key(|&c| (p[c], c)).expect("3 channels");
                    let base = ((y * w + x) * 3) as usize;
                    for c in 0..3 {
                        let mut dchroma = 0.0;
                        if c == hi {
                            dchroma += 1.0;
                        }
                        if c == lo {
                            dchroma -= 1.0;
                        }
                        let d = Self::CHROMA_GAIN * dchroma / n + self.tmpl(lx, ly, c) - mean_w[c];
                        grad[base + c] = (ds * d) as f32;
                    }
                }
            }
        }
        Ok(grad)
    }
}

fn saturation(p: &[u8]) -> f64 {
    let max = p.iter().copied().max().unwrap_or(0) as f64;
    let min = p.iter().copied().min().unwrap_or(0) as f64;
    if max == 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// SHA-256 over a seed and length-prefixed fields.
struct KeyedHasher(Sha256);

impl KeyedHasher {
    fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        Self(h)
    }

    fn bytes(&mut self, b: &[u8]) {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
    }

    fn u64(&mut self, v: u64) {
        self.0.update(v.to_le_bytes());
    }

    fn image(&mut self, image: &Image) {
        self.u64(image.width() as u64);
        self.u64(image.height() as u64);
        self.bytes(image.as_bytes());
    }

    fn mask(&mut self, mask: &BinaryMask) {
        self.u64(mask.width() as u64);
        self.u64(mask.height() as u64);
        let packed: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
        self.bytes(&packed);
    }

    fn bbox(&mut self, b: BoundingBox) {
        for v in b.as_array() {
            self.u64(v as u64);
        }
    }

    fn finish(self) -> [u8; 32] {
        let out = self.0.finalize();
        let mut arr = [0u8; 32];
        arr.copy_from_slice(out.as_slice());
        arr
    }
}
