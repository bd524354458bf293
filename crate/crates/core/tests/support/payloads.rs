//! Random wire payloads for every route, shared by the roundtrip tests.

use anonymizer_core::backends::wire::*;
use anonymizer_core::backends::BackendRole;
use anonymizer_core::manifold::Embedding;
use anonymizer_core::raster::{BinaryMask, BoundingBox, Image};
use rand::Rng;

pub fn image<R: Rng>(rng: &mut R, w: u32, h: u32) -> Image {
    let data = (0..w * h * 3).map(|_| rng.random()).collect();
    Image::from_raw(w, h, data).unwrap()
}

pub fn mask<R: Rng>(rng: &mut R, w: u32, h: u32) -> BinaryMask {
    let p: f64 = rng.random();
    BinaryMask::from_bits(w, h, (0..w * h).map(|_| rng.random_bool(p)).collect()).unwrap()
}

pub fn bbox_in<R: Rng>(rng: &mut R, w: u32, h: u32) -> BoundingBox {
    let x = rng.random_range(0..w);
    let y = rng.random_range(0..h);
    BoundingBox::new(x, y, rng.random_range(1..=w - x), rng.random_range(1..=h - y))
}

pub fn embedding<R: Rng>(rng: &mut R) -> Embedding {
    let dim = rng.random_range(1..=24);
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(e) = Embedding::normalized(v) {
            return e;
        }
    }
}

fn dims<R: Rng>(rng: &mut R) -> (u32, u32) {
    (rng.random_range(1..=12), rng.random_range(1..=12))
}

pub fn request<R: Rng>(rng: &mut R, route: Route) -> BackendRequest {
    let (w, h) = dims(rng);
    let img = image(rng, w, h);
    let seed = rng.random();
    let steps = rng.random_range(1..=200);
    match route {
        Route::DetectGrad => BackendRequest::DetectGrad(ImageRequest { image: img }),
        Route::Role(role) => match role {
            BackendRole::Segment => BackendRequest::Segment(ImageRequest { image: img }),
            BackendRole::Edges => BackendRequest::Edges(ImageRequest { image: img }),
            BackendRole::Embed => BackendRequest::Embed(ImageRequest { image: img }),
            BackendRole::Detect => BackendRequest::Detect(ImageRequest { image: img }),
            BackendRole::Pose => BackendRequest::Pose(PoseRequest { bbox: bbox_in(rng, w, h), image: img }),
            BackendRole::Inpaint => {
                BackendRequest::Inpaint(InpaintRequest { mask: mask(rng, w, h), image: img, steps, seed })
            }
            BackendRole::Generate => BackendRequest::Generate(GenerationRequest {
                mask: mask(rng, w, h),
                pose_map: image(rng, w, h),
                edge_map: image(rng, w, h),
                masked_image: img,
                guide_embedding: embedding(rng),
                steps,
                seed,
            }),
            BackendRole::Faceswap => BackendRequest::Faceswap(FaceswapRequest {
                bbox: bbox_in(rng, w, h),
                image: img,
                guide_embedding: embedding(rng),
                seed,
            }),
            BackendRole::Enhance => BackendRequest::Enhance(EnhanceRequest { bbox: bbox_in(rng, w, h), image: img, seed }),
        },
    }
}

pub fn response<R: Rng>(rng: &mut R, route: Route) -> BackendResponse {
    let (w, h) = dims(rng);
    match route {
        Route::DetectGrad => {
            let values: Vec<f32> = (0..w * h * 3).map(|_| rng.random_range(-1e3..1e3)).collect();
            BackendResponse::Grad(GradResponse::encode(&values, w, h))
        }
        Route::Role(role) => match role {
            BackendRole::Segment => BackendResponse::Segment(SegmentResponse {
                bodies: (0..rng.random_range(0..4))
                    .map(|_| SegmentedBody { mask: mask(rng, w, h), bbox: bbox_in(rng, w, h), confidence: rng.random() })
                    .collect(),
            }),
            BackendRole::Pose => BackendResponse::Pose(PoseResponse {
                keypoints: (0..KEYPOINT_COUNT)
                    .map(|_| Keypoint {
                        x: rng.random_range(-10.0..500.0),
                        y: rng.random_range(-10.0..500.0),
                        confidence: rng.random(),
                    })
                    .collect(),
            }),
            BackendRole::Edges => BackendResponse::Edges(EdgesResponse { edge_map: image(rng, w, h) }),
            BackendRole::Embed => BackendResponse::Embed(EmbedResponse {
                embedding: embedding(rng),
                activity: format!("activity-{}", rng.random_range(0..100)),
            }),
            BackendRole::Detect => BackendResponse::Detect(DetectResponse {
                detections: (0..rng.random_range(0..5))
                    .map(|_| WireDetection { bbox: bbox_in(rng, w, h), objectness: rng.random() })
                    .collect(),
            }),
            BackendRole::Inpaint | BackendRole::Generate | BackendRole::Faceswap | BackendRole::Enhance => {
                BackendResponse::Image(ImageResponse { image: image(rng, w, h) })
            }
        },
    }
}

/// Schema name, and the first mismatch found over `n` random payloads.
pub fn roundtrip_all<R: Rng>(rng: &mut R, n: usize) -> Vec<(String, Result<(), String>)> {
    let mut out = Vec::new();
    for route in Route::all() {
        let mut req_result = Ok(());
        let mut resp_result = Ok(());
        for _ in 0..n {
            let req = request(rng, route);
            let back = req.to_json().and_then(|b| BackendRequest::from_json(route, &b));
            if req_result.is_ok() && back.as_ref().ok() != Some(&req) {
                req_result = Err(format!("{req:?} -> {back:?}"));
            }
            let resp = response(rng, route);
            let back = resp.to_json().and_then(|b| BackendResponse::from_json(route, &b));
            if resp_result.is_ok() && back.as_ref().ok() != Some(&resp) {
                resp_result = Err(format!("{resp:?} -> {back:?}"));
            }
        }
        out.push((format!("{} request", route.path()), req_result));
        out.push((format!("{} response", route.path()), resp_result));
    }
    out
}
