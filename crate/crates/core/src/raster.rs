//! RGB images, binary masks and the pixel operations the pipeline composes.
//!
//! Coordinates are `x` = column, `y` = row, origin top-left.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("box {0:?} does not fit inside a {1}x{2} image")]
    OutOfBounds(BoundingBox, u32, u32),
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
}

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image").field("width", &self.width).field("height", &self.height).finish()
    }
}

impl Image {
    pub fn new(width: u32, height: u32) -> Result<Self, RasterError> {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidArgument("image dimensions must be positive".into()));
        }
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Ok(Self { width, height, data })
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidArgument("image dimensions must be positive".into()));
        }
        if data.len() != width as usize * height as usize * 3 {
            return Err(RasterError::DimensionMismatch(format!(
                "buffer of {} bytes for {width}x{height} RGB",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn index(&self, x: u32, y: u32) -> usize {
        assert!(x < self.width && y < self.height, "pixel ({x},{y}) outside {}x{}", self.width, self.height);
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn fill_rect(&mut self, bbox: BoundingBox, rgb: [u8; 3]) -> Result<(), RasterError> {
        bbox.check_inside(self.width, self.height)?;
        for y in bbox.y..bbox.y + bbox.h {
            for x in bbox.x..bbox.x + bbox.w {
                self.put(x, y, rgb);
            }
        }
        Ok(())
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        let buf = RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png).map_err(|e| RasterError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Decodes PNG or JPEG (or anything else the `image` crate sniffs) to RGB.
    pub fn decode(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory(bytes).map_err(|e| RasterError::Decode(e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_raw(w, h, rgb.into_raw())
    }
}

/// One boolean per pixel, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![true; width as usize * height as usize] }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, RasterError> {
        if bits.len() != width as usize * height as usize {
            return Err(RasterError::DimensionMismatch(format!(
                "{} bits for {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn from_rect(width: u32, height: u32, bbox: BoundingBox) -> Result<Self, RasterError> {
        bbox.check_inside(width, height)?;
        Ok(Self::from_fn(width, height, |x, y| bbox.contains(x, y)))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask, RasterError> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask, RasterError> {
        self.zip_with(other, |a, b| a && !b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask, RasterError> {
        if self.dims() != other.dims() {
            return Err(RasterError::DimensionMismatch(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Single-channel PNG with 0/255 values.
    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        let raw = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf = GrayImage::from_raw(self.width, self.height, raw).expect("length matches");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png).map_err(|e| RasterError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Any non-zero luma counts as set.
    pub fn decode(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory(bytes).map_err(|e| RasterError::Decode(e.to_string()))?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Ok(Self { width: w, height: h, bits: gray.into_raw().into_iter().map(|v| v > 0).collect() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }

    pub fn check_inside(&self, width: u32, height: u32) -> Result<(), RasterError> {
        let fits = self.w > 0
            && self.h > 0
            && (self.x as u64 + self.w as u64) <= width as u64
            && (self.y as u64 + self.h as u64) <= height as u64;
        if fits {
            Ok(())
        } else {
            Err(RasterError::OutOfBounds(*self, width, height))
        }
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.as_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        <[u32; 4]>::deserialize(deserializer).map(Self::from)
    }
}

impl From<[u32; 4]> for BoundingBox {
    fn from(v: [u32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Default dilation radius for a body: `max(3, round(0.02 * max(w, h)))`.
pub fn default_dilation_radius(bbox: &BoundingBox) -> u32 {
    let side = bbox.w.max(bbox.h) as f64;
    ((0.02 * side).round() as u32).max(3)
}

/// Dilation with a `(2r+1)`-square structuring element, `iterations` times.
/// The square is separable, so each pass is a horizontal then a vertical
/// running-window OR.
pub fn dilate(mask: &BinaryMask, radius: u32, iterations: u32) -> Result<BinaryMask, RasterError> {
    if radius == 0 || iterations == 0 {
        return Err(RasterError::InvalidArgument("radius and iterations must be >= 1".into()));
    }
    let mut current = mask.clone();
    for _ in 0..iterations {
        current = dilate_once(&current, radius as usize);
    }
    Ok(current)
}

fn dilate_once(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        let row = &mask.bits[y * w..(y + 1) * w];
        // prefix counts give O(1) window queries
        let mut prefix = vec![0u32; w + 1];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x] as u32;
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            horiz[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    let mut out = vec![false; w * h];
    let mut prefix = vec![0u32; h + 1];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + horiz[y * w + x] as u32;
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            out[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    BinaryMask { width: mask.width, height: mask.height, bits: out }
}

/// `patch` where `mask` is set, `base` elsewhere.
pub fn composite(base: &Image, patch: &Image, mask: &BinaryMask) -> Result<Image, RasterError> {
    if base.dims() != patch.dims() || base.dims() != mask.dims() {
        return Err(RasterError::DimensionMismatch(format!(
            "base {:?}, patch {:?}, mask {:?}",
            base.dims(),
            patch.dims(),
            mask.dims()
        )));
    }
    let mut out = base.clone();
    for (i, &set) in mask.bits.iter().enumerate() {
        if set {
            out.data[i * 3..i * 3 + 3].copy_from_slice(&patch.data[i * 3..i * 3 + 3]);
        }
    }
    Ok(out)
}

/// Like [`composite`], but masked pixels within `feather` pixels (Chebyshev)
/// of the mask border blend linearly toward `base`. Pixels outside the mask
/// are never touched.
pub fn composite_feathered(
    base: &Image,
    patch: &Image,
    mask: &BinaryMask,
    feather: u32,
) -> Result<Image, RasterError> {
    if feather == 0 {
        return composite(base, patch, mask);
    }
    let mut out = composite(base, patch, mask)?;
    let (w, h) = (mask.width as i64, mask.height as i64);
    let f = feather as i64;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as u32, y as u32) {
                continue;
            }
            // distance to the nearest unset pixel, capped at feather + 1
            let mut dist = f + 1;
            for d in 1..=f {
                let hit = (-d..=d).any(|dy| {
                    (-d..=d).any(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0 && ny >= 0 && nx < w && ny < h && !mask.get(nx as u32, ny as u32)
                    })
                });
                if hit {
                    dist = d;
                    break;
                }
            }
            if dist <= f {
                let alpha = dist as f64 / (f + 1) as f64;
                let (b, p) = (base.get(x as u32, y as u32), patch.get(x as u32, y as u32));
                let mixed = [0, 1, 2].map(|c| (alpha * p[c] as f64 + (1.0 - alpha) * b[c] as f64).round() as u8);
                out.put(x as u32, y as u32, mixed);
            }
        }
    }
    Ok(out)
}

pub fn crop(image: &Image, bbox: BoundingBox) -> Result<Image, RasterError> {
    bbox.check_inside(image.width, image.height)?;
    let mut data = Vec::with_capacity(bbox.area() as usize * 3);
    for y in bbox.y..bbox.y + bbox.h {
        let start = (y as usize * image.width as usize + bbox.x as usize) * 3;
        data.extend_from_slice(&image.data[start..start + bbox.w as usize * 3]);
    }
    Image::from_raw(bbox.w, bbox.h, data)
}

/// Writes `patch` into `image` with its top-left corner at (x, y).
pub fn paste(image: &Image, patch: &Image, x: u32, y: u32) -> Result<Image, RasterError> {
    let bbox = BoundingBox::new(x, y, patch.width, patch.height);
    bbox.check_inside(image.width, image.height)?;
    let mut out = image.clone();
    for row in 0..patch.height {
        let dst = ((y + row) as usize * image.width as usize + x as usize) * 3;
        let src = row as usize * patch.width as usize * 3;
        out.data[dst..dst + patch.width as usize * 3]
            .copy_from_slice(&patch.data[src..src + patch.width as usize * 3]);
    }
    Ok(out)
}

/// Tightest box around the set pixels.
pub fn mask_to_bbox(mask: &BinaryMask) -> Result<BoundingBox, RasterError> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let mut any = false;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if !any {
        return Err(RasterError::EmptyMask);
    }
    Ok(BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

pub fn union_masks(masks: &[BinaryMask]) -> Result<BinaryMask, RasterError> {
    let first = masks.first().ok_or_else(|| RasterError::InvalidArgument("no masks to union".into()))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        out = out.zip_with(m, |a, b| a || b)?;
    }
    Ok(out)
}

/// Copy of `image` with every masked pixel set to black.
pub fn zero_masked(image: &Image, mask: &BinaryMask) -> Result<Image, RasterError> {
    let black = Image::new(image.width, image.height)?;
    composite(image, &black, mask)
}
