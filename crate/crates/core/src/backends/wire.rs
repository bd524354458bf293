//! JSON request/response schemas, one pair per backend route.
//!
//! Images travel as base64-encoded PNG; masks as single-channel 0/255 PNG;
//! boxes as `[x, y, w, h]`; keypoints as `[x, y, confidence]`.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendRole};
use crate::manifold::Embedding;
use crate::raster::{BinaryMask, BoundingBox, Image};

pub const KEYPOINT_COUNT: usize = 18;

pub(crate) mod png_image {
    use super::*;
    use serde::{de::Error as _, ser::Error as _, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(image: &Image, s: S) -> Result<S::Ok, S::Error> {
        let png = image.to_png().map_err(S::Error::custom)?;
        s.serialize_str(&B64.encode(png))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Image, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = B64.decode(text.as_bytes()).map_err(D::Error::custom)?;
        Image::decode(&bytes).map_err(D::Error::custom)
    }
}

pub(crate) mod png_mask {
    use super::*;
    use serde::{de::Error as _, ser::Error as _, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mask: &BinaryMask, s: S) -> Result<S::Ok, S::Error> {
        let png = mask.to_png().map_err(S::Error::custom)?;
        s.serialize_str(&B64.encode(png))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BinaryMask, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = B64.decode(text.as_bytes()).map_err(D::Error::custom)?;
        BinaryMask::decode(&bytes).map_err(D::Error::custom)
    }
}

/// Unit vectors pass through untouched; anything else is normalized.
pub(crate) mod embedding_values {
    use super::*;
    use serde::{de::Error as _, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(e: &Embedding, s: S) -> Result<S::Ok, S::Error> {
        e.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Embedding, D::Error> {
        let raw = Vec::<f32>::deserialize(d)?;
        if raw.is_empty() {
            return Err(D::Error::custom("embedding is empty"));
        }
        Embedding::from_unit(raw.clone())
            .or_else(|_| Embedding::normalized(raw))
            .map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl From<[f64; 3]> for Keypoint {
    fn from(v: [f64; 3]) -> Self {
        Self { x: v[0], y: v[1], confidence: v[2] }
    }
}

impl From<Keypoint> for [f64; 3] {
    fn from(k: Keypoint) -> Self {
        [k.x, k.y, k.confidence]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    #[serde(with = "png_image")]
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    #[serde(with = "png_image")]
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedBody {
    #[serde(with = "png_mask")]
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub bodies: Vec<SegmentedBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRequest {
    #[serde(with = "png_image")]
    pub image: Image,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseResponse {
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgesResponse {
    #[serde(with = "png_image")]
    pub edge_map: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    #[serde(with = "embedding_values")]
    pub embedding: Embedding,
    pub activity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintRequest {
    /// Input with the region to fill zeroed.
    #[serde(with = "png_image")]
    pub image: Image,
    #[serde(with = "png_mask")]
    pub mask: BinaryMask,
    pub steps: u32,
    pub seed: u64,
}

/// Multi-conditioning input for body generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Input with the dilated body region zeroed.
    #[serde(rename = "image", with = "png_image")]
    pub masked_image: Image,
    #[serde(with = "png_mask")]
    pub mask: BinaryMask,
    #[serde(with = "png_image")]
    pub pose_map: Image,
    #[serde(with = "png_image")]
    pub edge_map: Image,
    #[serde(with = "embedding_values")]
    pub guide_embedding: Embedding,
    pub steps: u32,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), String> {
        let dims = self.masked_image.dims();
        if self.mask.dims() != dims || self.pose_map.dims() != dims || self.edge_map.dims() != dims {
            return Err("image, mask, pose_map and edge_map must share dimensions".into());
        }
        if self.steps == 0 {
            return Err("steps must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceswapRequest {
    #[serde(with = "png_image")]
    pub image: Image,
    pub bbox: BoundingBox,
    #[serde(with = "embedding_values")]
    pub guide_embedding: Embedding,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceRequest {
    #[serde(with = "png_image")]
    pub image: Image,
    pub bbox: BoundingBox,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<WireDetection>,
}

/// Objectness gradient as little-endian `f32`, shape `[height, width, 3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradResponse {
    pub grad: String,
    pub shape: [u32; 3],
}

impl GradResponse {
    pub fn encode(values: &[f32], width: u32, height: u32) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { grad: B64.encode(bytes), shape: [height, width, 3] }
    }

    pub fn decode(&self) -> Result<Vec<f32>, String> {
        let bytes = B64.decode(self.grad.as_bytes()).map_err(|e| e.to_string())?;
        let expected = self.shape.iter().map(|&v| v as usize).product::<usize>() * 4;
        if bytes.len() != expected || self.shape[2] != 3 {
            return Err(format!("{} gradient bytes for shape {:?}", bytes.len(), self.shape));
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

/// One request to one route.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendRequest {
    Segment(ImageRequest),
    Pose(PoseRequest),
    Edges(ImageRequest),
    Embed(ImageRequest),
    Inpaint(InpaintRequest),
    Generate(GenerationRequest),
    Faceswap(FaceswapRequest),
    Enhance(EnhanceRequest),
    Detect(ImageRequest),
    DetectGrad(ImageRequest),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendResponse {
    Segment(SegmentResponse),
    Pose(PoseResponse),
    Edges(EdgesResponse),
    Embed(EmbedResponse),
    Image(ImageResponse),
    Detect(DetectResponse),
    Grad(GradResponse),
}

/// Route addressed by a request; `detect` serves two paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Route {
    Role(BackendRole),
    DetectGrad,
}

impl Route {
    pub fn role(self) -> BackendRole {
        match self {
            Route::Role(r) => r,
            Route::DetectGrad => BackendRole::Detect,
        }
    }

    /// Path below `/v1/`.
    pub fn path(self) -> String {
        match self {
            Route::Role(r) => r.as_str().to_string(),
            Route::DetectGrad => "detect/grad".to_string(),
        }
    }

    pub fn all() -> Vec<Route> {
        let mut out: Vec<Route> = BackendRole::ALL.iter().map(|&r| Route::Role(r)).collect();
        out.push(Route::DetectGrad);
        out
    }
}

impl BackendRequest {
    pub fn route(&self) -> Route {
        match self {
            BackendRequest::Segment(_) => Route::Role(BackendRole::Segment),
            BackendRequest::Pose(_) => Route::Role(BackendRole::Pose),
            BackendRequest::Edges(_) => Route::Role(BackendRole::Edges),
            BackendRequest::Embed(_) => Route::Role(BackendRole::Embed),
            BackendRequest::Inpaint(_) => Route::Role(BackendRole::Inpaint),
            BackendRequest::Generate(_) => Route::Role(BackendRole::Generate),
            BackendRequest::Faceswap(_) => Route::Role(BackendRole::Faceswap),
            BackendRequest::Enhance(_) => Route::Role(BackendRole::Enhance),
            BackendRequest::Detect(_) => Route::Role(BackendRole::Detect),
            BackendRequest::DetectGrad(_) => Route::DetectGrad,
        }
    }

    pub fn role(&self) -> BackendRole {
        self.route().role()
    }

    pub fn to_json(&self) -> Result<Vec<u8>, BackendError> {
        let result = match self {
            BackendRequest::Segment(r)
            | BackendRequest::Edges(r)
            | BackendRequest::Embed(r)
            | BackendRequest::Detect(r)
            | BackendRequest::DetectGrad(r) => serde_json::to_vec(r),
            BackendRequest::Pose(r) => serde_json::to_vec(r),
            BackendRequest::Inpaint(r) => serde_json::to_vec(r),
            BackendRequest::Generate(r) => serde_json::to_vec(r),
            BackendRequest::Faceswap(r) => serde_json::to_vec(r),
            BackendRequest::Enhance(r) => serde_json::to_vec(r),
        };
        result.map_err(|e| BackendError::protocol(self.role(), e.to_string()))
    }

    /// Parses a request body arriving on `route`.
    pub fn from_json(route: Route, body: &[u8]) -> Result<Self, BackendError> {
        let err = |e: serde_json::Error| BackendError::protocol(route.role(), e.to_string());
        Ok(match route {
            Route::DetectGrad => BackendRequest::DetectGrad(serde_json::from_slice(body).map_err(err)?),
            Route::Role(role) => match role {
                BackendRole::Segment => BackendRequest::Segment(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Pose => BackendRequest::Pose(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Edges => BackendRequest::Edges(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Embed => BackendRequest::Embed(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Inpaint => BackendRequest::Inpaint(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Generate => {
                    let req: GenerationRequest = serde_json::from_slice(body).map_err(err)?;
                    req.validate().map_err(|e| BackendError::protocol(role, e))?;
                    BackendRequest::Generate(req)
                }
                BackendRole::Faceswap => BackendRequest::Faceswap(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Enhance => BackendRequest::Enhance(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Detect => BackendRequest::Detect(serde_json::from_slice(body).map_err(err)?),
            },
        })
    }
}

impl BackendResponse {
    pub fn to_json(&self) -> Result<Vec<u8>, BackendError> {
        let result = match self {
            BackendResponse::Segment(r) => serde_json::to_vec(r),
            BackendResponse::Pose(r) => serde_json::to_vec(r),
            BackendResponse::Edges(r) => serde_json::to_vec(r),
            BackendResponse::Embed(r) => serde_json::to_vec(r),
            BackendResponse::Image(r) => serde_json::to_vec(r),
            BackendResponse::Detect(r) => serde_json::to_vec(r),
            BackendResponse::Grad(r) => serde_json::to_vec(r),
        };
        result.map_err(|e| BackendError::Protocol { role: "response".into(), detail: e.to_string() })
    }

    /// Parses and validates the response body for `route`.
    pub fn from_json(route: Route, body: &[u8]) -> Result<Self, BackendError> {
        let role = route.role();
        let err = |e: serde_json::Error| BackendError::protocol(role, e.to_string());
        let response = match route {
            Route::DetectGrad => BackendResponse::Grad(serde_json::from_slice(body).map_err(err)?),
            Route::Role(r) => match r {
                BackendRole::Segment => BackendResponse::Segment(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Pose => BackendResponse::Pose(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Edges => BackendResponse::Edges(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Embed => BackendResponse::Embed(serde_json::from_slice(body).map_err(err)?),
                BackendRole::Inpaint | BackendRole::Generate | BackendRole::Faceswap | BackendRole::Enhance => {
                    BackendResponse::Image(serde_json::from_slice(body).map_err(err)?)
                }
                BackendRole::Detect => BackendResponse::Detect(serde_json::from_slice(body).map_err(err)?),
            },
        };
        response.validate(route)?;
        Ok(response)
    }

    /// Semantic checks serde cannot express.
    pub fn validate(&self, route: Route) -> Result<(), BackendError> {
        let role = route.role();
        match self {
            BackendResponse::Embed(r) if r.activity.is_empty() => {
                Err(BackendError::protocol(role, "field `activity` must be non-empty"))
            }
            BackendResponse::Pose(r) if r.keypoints.len() != KEYPOINT_COUNT => Err(BackendError::protocol(
                role,
                format!("field `keypoints` has {} entries, expected {KEYPOINT_COUNT}", r.keypoints.len()),
            )),
            BackendResponse::Segment(r) => {
                for body in &r.bodies {
                    body.bbox
                        .check_inside(body.mask.width(), body.mask.height())
                        .map_err(|e| BackendError::protocol(role, format!("field `bbox`: {e}")))?;
                }
                Ok(())
            }
            BackendResponse::Detect(r) => {
                if r.detections.iter().any(|d| !(0.0..=1.0).contains(&d.objectness)) {
                    return Err(BackendError::protocol(role, "field `objectness` outside [0, 1]"));
                }
                Ok(())
            }
            BackendResponse::Grad(r) => {
                r.decode().map_err(|e| BackendError::protocol(role, format!("field `grad`: {e}")))?;
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_activity_names_the_field() {
        let body = br#"{"embedding":[1.0,0.0]}"#;
        let err = BackendResponse::from_json(Route::Role(BackendRole::Embed), body).unwrap_err();
        assert!(err.to_string().contains("activity"), "{err}");
        assert!(matches!(err, BackendError::Protocol { .. }));
    }

    #[test]
    fn empty_activity_rejected() {
        let body = br#"{"embedding":[1.0,0.0],"activity":""}"#;
        let err = BackendResponse::from_json(Route::Role(BackendRole::Embed), body).unwrap_err();
        assert!(err.to_string().contains("activity"));
    }

    #[test]
    fn embedding_normalized_on_receipt() {
        let body = br#"{"embedding":[3.0,4.0],"activity":"run"}"#;
        match BackendResponse::from_json(Route::Role(BackendRole::Embed), body).unwrap() {
            BackendResponse::Embed(r) => assert_eq!(r.embedding.as_slice(), &[0.6, 0.8]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_keypoint_count_rejected() {
        let body = br#"{"keypoints":[[1,2,0.5]]}"#;
        let err = BackendResponse::from_json(Route::Role(BackendRole::Pose), body).unwrap_err();
        assert!(err.to_string().contains("keypoints"));
    }

    #[test]
    fn grad_shape_checked() {
        let mut g = GradResponse::encode(&[1.0, -2.0, 0.5], 1, 1);
        assert_eq!(g.decode().unwrap(), vec![1.0, -2.0, 0.5]);
        g.shape = [2, 1, 3];
        assert!(g.decode().is_err());
    }

    #[test]
    fn generation_request_dims_validated() {
        let img = Image::new(4, 4).unwrap();
        let req = GenerationRequest {
            masked_image: img.clone(),
            mask: BinaryMask::empty(4, 4),
            pose_map: Image::new(4, 3).unwrap(),
            edge_map: img,
            guide_embedding: Embedding::normalized(vec![1.0]).unwrap(),
            steps: 60,
            seed: 1,
        };
        assert!(req.validate().is_err());
        let json = serde_json::to_vec(&req).unwrap();
        assert!(BackendRequest::from_json(Route::Role(BackendRole::Generate), &json).is_err());
    }
}
