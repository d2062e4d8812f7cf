//! Procedural cartoon faces with a 68-point annotation, plus random hole
//! masks. Used for smoke tests, demos and fixtures where no real face data
//! may be shipped.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_landmarks, FileList};
use crate::error::{Error, Result};
use crate::types::{BinaryMask, FaceImage, LandmarkSet, NUM_LANDMARKS};

struct Face {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: [f64; 3],
    background: [f64; 3],
    lips: [f64; 3],
    mouth_open: f64,
}

fn ellipse_points(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let t = from + (to - from) * i as f64 / (n - 1).max(1) as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

impl Face {
    fn random(rng: &mut impl Rng) -> Self {
        let tone = rng.gen_range(0.45..0.95);
        Face {
            cx: rng.gen_range(0.45..0.55),
            cy: rng.gen_range(0.48..0.56),
            rx: rng.gen_range(0.26..0.34),
            ry: rng.gen_range(0.34..0.42),
            skin: [tone, tone * rng.gen_range(0.7..0.85), tone * rng.gen_range(0.55..0.7)],
            background: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            lips: [rng.gen_range(0.55..0.85), rng.gen_range(0.1..0.3), rng.gen_range(0.15..0.35)],
            mouth_open: rng.gen_range(0.0..0.5),
        }
    }

    /// Points in the usual 68-point order: jaw, brows, nose, eyes, mouth.
    fn landmarks(&self) -> Vec<(f64, f64)> {
        let (cx, cy, rx, ry) = (self.cx, self.cy, self.rx, self.ry);
        // jaw runs along the lower half, left to right
        let mut p = ellipse_points(cx, cy, rx, ry, PI, 0.0, 17);
        let eye_y = cy - 0.12 * ry / 0.38;
        let brow_y = eye_y - 0.07;
        for side in [-1.0, 1.0] {
            for i in 0..5 {
                let t = i as f64 / 4.0;
                let x = cx + side * (0.04 + 0.16 * if side < 0.0 { 1.0 - t } else { t }) * rx / 0.3;
                p.push((x, brow_y - 0.02 * (PI * t).sin()));
            }
        }
        for i in 0..4 {
            p.push((cx, eye_y + 0.03 + 0.035 * i as f64));
        }
        for i in 0..5 {
            p.push((cx + (i as f64 - 2.0) * 0.018, eye_y + 0.15));
        }
        for side in [-1.0, 1.0] {
            let ex = cx + side * 0.11 * rx / 0.3;
            for i in 0..6 {
                let a = PI + 2.0 * PI * i as f64 / 6.0;
                p.push((ex + 0.045 * a.cos(), eye_y + 0.018 * a.sin()));
            }
        }
        let my = cy + 0.2 * ry / 0.38;
        let mw = 0.09 * rx / 0.3;
        for i in 0..12 {
            let a = PI + 2.0 * PI * i as f64 / 12.0;
            p.push((cx + mw * a.cos(), my + 0.035 * a.sin()));
        }
        let open = 0.02 * self.mouth_open;
        for i in 0..8 {
            let a = PI + 2.0 * PI * i as f64 / 8.0;
            p.push((cx + 0.7 * mw * a.cos(), my + open * a.sin()));
        }
        debug_assert_eq!(p.len(), NUM_LANDMARKS);
        p
    }

    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        let inside = |cx: f64, cy: f64, rx: f64, ry: f64| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0;
        let mut c = self.background.map(|v| v * (0.8 + 0.2 * y));
        if inside(self.cx, self.cy, self.rx, self.ry) {
            let shade = 1.0 - 0.25 * ((x - self.cx) / self.rx).powi(2);
            c = self.skin.map(|v| v * shade);
        }
        let eye_y = self.cy - 0.12 * self.ry / 0.38;
        for side in [-1.0, 1.0] {
            let ex = self.cx + side * 0.11 * self.rx / 0.3;
            if inside(ex, eye_y, 0.045, 0.018) {
                c = [0.95, 0.95, 0.95];
            }
            if inside(ex, eye_y, 0.016, 0.016) {
                c = [0.1, 0.08, 0.06];
            }
            let bx = ex + side * 0.01;
            if inside(bx, eye_y - 0.08, 0.06, 0.01) {
                c = self.skin.map(|v| v * 0.35);
            }
        }
        let my = self.cy + 0.2 * self.ry / 0.38;
        if inside(self.cx, my, 0.09 * self.rx / 0.3, 0.035) {
            c = self.lips;
            if inside(self.cx, my, 0.063 * self.rx / 0.3, 0.02 * self.mouth_open + 1e-6) {
                c = [0.2, 0.05, 0.05];
            }
        }
        if inside(self.cx, eye_y + 0.13, 0.02, 0.03) {
            c = self.skin.map(|v| v * 0.85);
        }
        c
    }
}

/// Face image of `size x size` and its landmarks for `seed`.
pub fn face(seed: u64, size: usize) -> (FaceImage, LandmarkSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Face::random(&mut rng);
    let plane = size * size;
    let mut px = vec![0.0f32; 3 * plane];
    // 2x2 supersampling softens the edges
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let c = f.color_at((x as f64 + dx) / size as f64, (y as f64 + dy) / size as f64);
                (0..3).for_each(|k| acc[k] += c[k] / 4.0);
            }
            for k in 0..3 {
                px[k * plane + y * size + x] = acc[k].clamp(0.0, 1.0) as f32;
            }
        }
    }
    let points: Vec<(f32, f32)> = f.landmarks().into_iter().map(|(x, y)| (x.clamp(0.0, 1.0) as f32, y.clamp(0.0, 1.0) as f32)).collect();
    (FaceImage::new(size, size, px).expect("synthetic image"), LandmarkSet::from_points(&points).expect("68 points"))
}

/// Free-form mask of random thick strokes, grown until the hole ratio
/// reaches `target` (or the stroke budget runs out).
pub fn stroke_mask(seed: u64, size: usize, target: f64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0u8; size * size];
    let s = size as f64;
    let mut holes = 0usize;
    for _ in 0..200 {
        if holes as f64 >= target * (size * size) as f64 {
            break;
        }
        let (mut x, mut y) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let r = rng.gen_range(0.02..0.06) * s;
        for _ in 0..rng.gen_range(2..6) {
            let a = rng.gen_range(0.0..2.0 * PI);
            let len = rng.gen_range(0.1..0.3) * s;
            let steps = (len / (r * 0.5)).ceil() as usize;
            for _ in 0..steps {
                x = (x + a.cos() * r * 0.5).clamp(0.0, s - 1.0);
                y = (y + a.sin() * r * 0.5).clamp(0.0, s - 1.0);
                let (x0, x1) = ((x - r).max(0.0) as usize, ((x + r) as usize).min(size - 1));
                let (y0, y1) = ((y - r).max(0.0) as usize, ((y + r) as usize).min(size - 1));
                for py in y0..=y1 {
                    for px in x0..=x1 {
                        if (px as f64 - x).powi(2) + (py as f64 - y).powi(2) <= r * r && data[py * size + px] == 0 {
                            data[py * size + px] = 1;
                            holes += 1;
                        }
                    }
                }
            }
        }
    }
    BinaryMask::new(size, size, data).expect("mask shape")
}

/// Ellipse covering the mouth landmarks (points 48..68) with a margin.
pub fn mouth_mask(landmarks: &LandmarkSet, size: usize) -> BinaryMask {
    let pts: Vec<(f32, f32)> = (48..NUM_LANDMARKS).map(|i| landmarks.point(i)).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f32::MAX, f32::MIN, f32::MAX, f32::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
    let (rx, ry) = ((x1 - x0) as f64 * 0.75 + 0.02, (y1 - y0) as f64 * 0.75 + 0.03);
    BinaryMask::from_fn(size, size, |x, y| {
        let u = (x as f64 + 0.5) / size as f64;
        let v = (y as f64 + 0.5) / size as f64;
        ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0
    })
}

/// Paths of a synthetic dataset written by `write_dataset`.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: PathBuf,
    pub landmarks: PathBuf,
    pub masks: PathBuf,
}

/// Writes `n_images` faces (PNG plus landmark file) and `n_masks` stroke
/// masks under `dir`, along with one flist per kind.
pub fn write_dataset(dir: &Path, n_images: usize, n_masks: usize, size: usize, seed: u64) -> Result<SyntheticDataset> {
    for sub in ["images", "landmarks", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let (mut imgs, mut lms, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n_images {
        let (img, lm) = face(seed.wrapping_add(i as u64), size);
        let ip = dir.join("images").join(format!("{i:05}.png"));
        img.to_rgb8().save(&ip).map_err(|e| Error::Decode { path: ip.clone(), reason: e.to_string() })?;
        let lp = dir.join("landmarks").join(format!("{i:05}.txt"));
        write_landmarks(&lp, &lm, size, size)?;
        imgs.push(ip);
        lms.push(lp);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61736b);
    for i in 0..n_masks {
        let m = stroke_mask(rng.gen(), size, rng.gen_range(0.05..0.5));
        let mp = dir.join("masks").join(format!("{i:05}.png"));
        m.to_luma8().save(&mp).map_err(|e| Error::Decode { path: mp.clone(), reason: e.to_string() })?;
        masks.push(mp);
    }
    let out = SyntheticDataset { images: dir.join("images.flist"), landmarks: dir.join("landmarks.flist"), masks: dir.join("masks.flist") };
    FileList(imgs).write(&out.images)?;
    FileList(lms).write(&out.landmarks)?;
    FileList(masks).write(&out.masks)?;
    Ok(out)
}
