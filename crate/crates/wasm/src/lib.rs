//! Browser demo built on the core crate.
//!
//! A `Demo` holds one synthetic face. The page paints a mask over it and
//! calls back in for the mask's group, the rasterized landmark map, and a
//! preview fill through the same attention op the generator uses.

use inclg_core::data::{group_of, synthetic};
use inclg_core::graph::Graph;
use inclg_core::tensor::Tensor;
use inclg_core::types::{rasterize_landmarks, BinaryMask, FaceImage, LandmarkSet};
use wasm_bindgen::prelude::*;

const MIN_SIZE: usize = 16;
const MAX_SIZE: usize = 256;
/// Feature patch edge for the fill preview.
const PATCH: usize = 3;

#[wasm_bindgen]
pub struct Demo {
    face: FaceImage,
    landmarks: LandmarkSet,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> Result<Demo, String> {
        if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
            return Err(format!("size must be in {MIN_SIZE}..={MAX_SIZE}, got {size}"));
        }
        let (face, landmarks) = synthetic::face(seed as u64, size);
        Ok(Demo { face, landmarks })
    }

    pub fn size(&self) -> usize {
        self.face.width()
    }

    /// The face as RGBA bytes.
    pub fn image(&self) -> Vec<u8> {
        rgba(&self.face)
    }

    /// A mouth-region mask as one 0/1 byte per pixel.
    pub fn mouth_mask(&self) -> Vec<u8> {
        synthetic::mouth_mask(&self.landmarks, self.size()).data().to_vec()
    }

    /// `{"holes", "ratio", "group"}` for a 0/1 mask; group is null when the
    /// mask is empty or more than 60% hole.
    pub fn mask_stats(&self, mask: &[u8]) -> Result<String, String> {
        let m = self.mask(mask)?;
        let group = group_of(m.ratio()).map(|g| g.name());
        Ok(serde_json::json!({ "holes": m.hole_count(), "ratio": m.ratio(), "group": group }).to_string())
    }

    /// The face with its rasterized landmark map drawn over it.
    pub fn landmark_overlay(&self) -> Vec<u8> {
        let maps = rasterize_landmarks(&self.landmarks, self.size(), 1);
        let mut out = rgba(&self.face);
        for (i, &on) in maps.plane().iter().enumerate() {
            if on == 1 {
                out[i * 4..i * 4 + 3].copy_from_slice(&[255, 40, 40]);
            }
        }
        out
    }

    /// Fills the hole from known pixels with softmax attention over patch
    /// features; known pixels are returned unchanged.
    pub fn attention_fill(&self, mask: &[u8], temperature: f64) -> Result<Vec<u8>, String> {
        let m = self.mask(mask)?;
        if !(temperature > 0.0) {
            return Err(format!("temperature must be positive, got {temperature}"));
        }
        if m.hole_count() == m.data().len() {
            return Err("mask leaves no known pixels to copy from".into());
        }
        attention_fill(&self.face, &m, temperature).map(|f| rgba(&f)).map_err(|e| e.to_string())
    }
}

impl Demo {
    fn mask(&self, data: &[u8]) -> Result<BinaryMask, String> {
        let s = self.size();
        if data.len() != s * s {
            return Err(format!("mask has {} bytes, expected {}", data.len(), s * s));
        }
        BinaryMask::new(s, s, data.iter().map(|&v| (v != 0) as u8).collect()).map_err(|e| e.to_string())
    }
}

fn rgba(img: &FaceImage) -> Vec<u8> {
    let plane = img.width() * img.height();
    let px = img.pixels();
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for c in 0..3 {
            out.push((px[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Diffuses known colours into the hole so hole patches have something to
/// match on.
fn coarse_fill(img: &FaceImage, mask: &BinaryMask) -> Vec<f32> {
    let (w, h) = (img.width(), img.height());
    let plane = w * h;
    let mut px = img.pixels().to_vec();
    let hole = mask.data();
    let mut known: Vec<bool> = hole.iter().map(|&v| v == 0).collect();
    // onion peel: each pass fills hole pixels that touch a filled one
    loop {
        let mut next = known.clone();
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if known[i] {
                    continue;
                }
                let mut acc = [0.0f32; 3];
                let mut n = 0;
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if known[j] {
                        (0..3).for_each(|c| acc[c] += px[c * plane + j]);
                        n += 1;
                    }
                }
                if n > 0 {
                    (0..3).for_each(|c| px[c * plane + i] = acc[c] / n as f32);
                    next[i] = true;
                    changed = true;
                }
            }
        }
        known = next;
        if !changed {
            return px;
        }
    }
}

pub fn attention_fill(img: &FaceImage, mask: &BinaryMask, temperature: f64) -> inclg_core::Result<FaceImage> {
    let (w, h) = (img.width(), img.height());
    let plane = w * h;
    let coarse = coarse_fill(img, mask);
    // channel (c, dy, dx) holds the coarse value at the clamped neighbour
    let r = PATCH as i64 / 2;
    let mut feats = Vec::with_capacity(3 * PATCH * PATCH * plane);
    for c in 0..3 {
        for dy in -r..=r {
            for dx in -r..=r {
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        let (sx, sy) = ((x + dx).clamp(0, w as i64 - 1), (y + dy).clamp(0, h as i64 - 1));
                        feats.push(coarse[c * plane + sy as usize * w + sx as usize]);
                    }
                }
            }
        }
    }
    let channels = 3 * PATCH * PATCH;
    let hole: Vec<bool> = mask.data().iter().map(|&v| v == 1).collect();
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::from_vec(&[1, channels, h, w], feats)?);
    let y = g.attention(x, &hole, temperature, 1e-6)?;
    let (before, after) = (g.value(x).data(), g.value(y).data());
    // the op adds the attended vector at hole positions; its patch centre is the colour
    let centre = PATCH * PATCH / 2;
    let mut px = img.pixels().to_vec();
    for c in 0..3 {
        let ch = (c * PATCH * PATCH + centre) * plane;
        for i in (0..plane).filter(|&i| hole[i]) {
            px[c * plane + i] = after[ch + i] - before[ch + i];
        }
    }
    FaceImage::new(w, h, px)
}
