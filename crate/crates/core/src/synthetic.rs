//! Seeded synthetic scenes: flat-colored "people" on a low-chroma noisy
//! background. The mock segmenter and detector both key on chroma, so every
//! figure here is a detectable body.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{BoundingBox, Image};

/// Body colors keep every channel inside [0.12, 0.88] so a bounded
/// perturbation is never clipped at 0 or 255.
const LOW: u8 = 31;
const HIGH: u8 = 224;

fn body_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let hi = rng.random_range(0..3);
    let mut lo = rng.random_range(0..2);
    if lo >= hi {
        lo += 1;
    }
    let mut px = [0u8; 3];
    for (c, v) in px.iter_mut().enumerate() {
        *v = if c == hi {
            HIGH
        } else if c == lo {
            LOW
        } else {
            rng.random_range(LOW..=HIGH)
        };
    }
    px
}

fn background(rng: &mut ChaCha8Rng, width: u32, height: u32) -> Image {
    let mut img = Image::new(width, height).expect("non-empty");
    let base: i32 = rng.random_range(90..=160);
    for y in 0..height {
        for x in 0..width {
            let g = base + rng.random_range(-6..=6);
            let px = [0, 1, 2].map(|_| (g + rng.random_range(-2..=2)).clamp(0, 255) as u8);
            img.put(x, y, px);
        }
    }
    img
}

/// One standing figure per image, at least 16×24 px.
pub fn person_image(seed: u64, width: u32, height: u32) -> (Image, BoundingBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = background(&mut rng, width, height);
    let w = rng.random_range(16..=(width / 3).max(16));
    let h = rng.random_range(24..=(height * 3 / 4).max(24));
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    let bbox = BoundingBox::new(x, y, w, h);
    img.fill_rect(bbox, body_color(&mut rng)).expect("inside");
    (img, bbox)
}

/// `count` figures in disjoint columns; neighbours may sit within dilation
/// reach of each other, so merges happen.
pub fn multi_body_scene(seed: u64, count: usize) -> (Image, Vec<BoundingBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (width, height) = (24 * count as u32 + 16, 64);
    let mut img = background(&mut rng, width, height);
    let mut boxes = Vec::with_capacity(count);
    for i in 0..count as u32 {
        let w = rng.random_range(10..=18);
        let h = rng.random_range(20..=48);
        let x = 8 + 24 * i + rng.random_range(0..=(22 - w).min(6));
        let y = rng.random_range(2..=height - h - 2);
        let bbox = BoundingBox::new(x, y, w, h);
        img.fill_rect(bbox, body_color(&mut rng)).expect("inside");
        boxes.push(bbox);
    }
    (img, boxes)
}

/// Two figures side by side on a 96×64 canvas.
pub fn two_body_scene() -> Image {
    let mut img = Image::filled(96, 64, [120, 124, 118]).expect("non-empty");
    img.fill_rect(BoundingBox::new(12, 10, 20, 46), [210, 40, 60]).expect("inside");
    img.fill_rect(BoundingBox::new(58, 12, 22, 44), [40, 70, 210]).expect("inside");
    img
}
