//! Images, masks and landmark sets exchanged between the pipeline, the model
//! and the service.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Number of facial landmarks.
pub const NUM_LANDMARKS: usize = 68;
/// Serialized landmark length: interleaved `x0 y0 x1 y1 ...`.
pub const LANDMARK_VALUES: usize = 2 * NUM_LANDMARKS;
/// Canonical model resolution.
pub const IMAGE_SIZE: usize = 256;

/// RGB image, channel-major (`[3, H, W]`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl FaceImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                3 * width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Shape(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(FaceImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        FaceImage { width, height, pixels: vec![value.clamp(0.0, 1.0); 3 * width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(&[3, self.height, self.width], self.pixels.iter().map(|&v| T::c(v as f64)).collect())
            .expect("consistent image shape")
    }

    /// Builds an image from a `[3, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected [3, H, W], got {s:?}")));
        }
        let pixels = t.data().iter().map(|v| (v.f64() as f32).clamp(0.0, 1.0)).collect();
        Ok(FaceImage { width: s[2], height: s[1], pixels })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let plane = self.width * self.height;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([q(self.pixels[i]), q(self.pixels[plane + i]), q(self.pixels[2 * plane + i])])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0.0f32; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                pixels[c * w * h + i] = p.0[c] as f32 / 255.0;
            }
        }
        FaceImage { width: w, height: h, pixels }
    }
}

/// Binary hole mask; `1` marks pixels to synthesize.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!("{}x{} mask needs {} values, got {}", width, height, width * height, data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask { width, height, data: vec![0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        BinaryMask { width, height, data: vec![1; width * height] }
    }

    /// Mask from a predicate on `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y) as u8).collect();
        BinaryMask { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_hole(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Fraction of hole pixels.
    pub fn ratio(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.hole_count() as f64 / self.data.len() as f64
    }

    /// Downsample by `factor`; a cell is a hole when at least half its pixels are.
    pub fn downsample(&self, factor: usize) -> BinaryMask {
        let (w, h) = (self.width / factor, self.height / factor);
        let half = factor * factor;
        BinaryMask::from_fn(w, h, |x, y| {
            let mut n = 0;
            for dy in 0..factor {
                for dx in 0..factor {
                    n += self.data[(y * factor + dy) * self.width + x * factor + dx] as usize;
                }
            }
            2 * n >= half
        })
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.data[y as usize * self.width + x as usize] * 255])
        })
    }
}

/// 68 facial landmarks as 136 interleaved normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    values: Vec<f32>,
}

impl LandmarkSet {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != LANDMARK_VALUES {
            return Err(Error::Shape(format!("landmark set needs {LANDMARK_VALUES} values, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("landmark coordinates must be finite".into()));
        }
        Ok(LandmarkSet { values })
    }

    pub fn from_points(points: &[(f32, f32)]) -> Result<Self> {
        Self::new(points.iter().flat_map(|&(x, y)| [x, y]).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn point(&self, i: usize) -> (f32, f32) {
        (self.values[2 * i], self.values[2 * i + 1])
    }

    pub fn points(&self) -> impl Iterator<Item = (f32, f32)> + '_ {
        self.values.chunks(2).map(|p| (p[0], p[1]))
    }

    /// Copy with every coordinate clamped into `[0, 1]`.
    pub fn clamped(&self) -> LandmarkSet {
        LandmarkSet { values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    /// Mean Euclidean distance between corresponding points.
    pub fn mean_distance(&self, other: &LandmarkSet) -> f64 {
        self.points()
            .zip(other.points())
            .map(|((ax, ay), (bx, by))| (((ax - bx) as f64).powi(2) + ((ay - by) as f64).powi(2)).sqrt())
            .sum::<f64>()
            / NUM_LANDMARKS as f64
    }
}

/// Landmark positions rasterized onto a square grid, replicated per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkMapStack {
    size: usize,
    channels: usize,
    plane: Vec<u8>,
}

impl LandmarkMapStack {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The binary map shared by every channel.
    pub fn plane(&self) -> &[u8] {
        &self.plane
    }

    pub fn ones(&self) -> usize {
        self.plane.iter().filter(|&&v| v == 1).count()
    }

    /// Full `[channels, size, size]` array.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.channels * self.plane.len());
        for _ in 0..self.channels {
            data.extend(self.plane.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }));
        }
        Tensor::from_vec(&[self.channels, self.size, self.size], data).expect("consistent stack shape")
    }
}

/// Pixel index for a normalized coordinate on a `size`-wide grid, rounding half
/// away from zero and clamping to the border.
pub fn grid_index(v: f32, size: usize) -> usize {
    let max = (size - 1) as f64;
    let scaled = (v as f64 * max).round();
    if scaled.is_nan() {
        return 0;
    }
    scaled.clamp(0.0, max) as usize
}

/// Rasterize landmarks onto a `size x size` map replicated over `channels`.
pub fn rasterize_landmarks(landmarks: &LandmarkSet, size: usize, channels: usize) -> LandmarkMapStack {
    let mut plane = vec![0u8; size * size];
    for (x, y) in landmarks.points() {
        plane[grid_index(y, size) * size + grid_index(x, size)] = 1;
    }
    LandmarkMapStack { size, channels, plane }
}

/// `generated` inside the hole, `original` elsewhere.
pub fn composite(generated: &FaceImage, original: &FaceImage, mask: &BinaryMask) -> Result<FaceImage> {
    if generated.width != original.width
        || generated.height != original.height
        || mask.width != original.width
        || mask.height != original.height
    {
        return Err(Error::Shape(format!(
            "composite sizes differ: generated {}x{}, original {}x{}, mask {}x{}",
            generated.width, generated.height, original.width, original.height, mask.width, mask.height
        )));
    }
    let plane = original.width * original.height;
    let pixels = (0..3 * plane)
        .map(|i| if mask.data[i % plane] == 1 { generated.pixels[i] } else { original.pixels[i] })
        .collect();
    Ok(FaceImage { width: original.width, height: original.height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rasterize_origin() {
        let lm = LandmarkSet::new(vec![0.0; LANDMARK_VALUES]).unwrap();
        let s = rasterize_landmarks(&lm, 128, 68);
        assert_eq!(s.plane()[0], 1);
        assert_eq!(s.ones(), 1);
    }

    #[test]
    fn rasterize_collision_at_centre() {
        let lm = LandmarkSet::new(vec![0.5; LANDMARK_VALUES]).unwrap();
        let s = rasterize_landmarks(&lm, 128, 68);
        // 0.5 * 127 = 63.5 rounds away from zero to 64
        assert_eq!(s.ones(), 1);
        assert_eq!(s.plane()[64 * 128 + 64], 1);
        let t = s.to_tensor::<f32>();
        assert_eq!(t.shape(), &[68, 128, 128]);
    }

    #[test]
    fn rasterize_clamps_out_of_range() {
        let mut v = vec![0.3; LANDMARK_VALUES];
        v[0] = -4.0;
        v[1] = 9.0;
        let s = rasterize_landmarks(&LandmarkSet::new(v).unwrap(), 128, 68);
        assert_eq!(s.plane()[127 * 128], 1);
    }

    #[test]
    fn composite_extremes_and_checkerboard() {
        let a = FaceImage::filled(4, 4, 0.9);
        let b = FaceImage::new(4, 4, (0..48).map(|i| i as f32 / 48.0).collect()).unwrap();
        assert_eq!(composite(&a, &b, &BinaryMask::zeros(4, 4)).unwrap(), b);
        assert_eq!(composite(&a, &b, &BinaryMask::ones(4, 4)).unwrap(), a);
        let m = BinaryMask::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        let out = composite(&a, &b, &m).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = if (x + y) % 2 == 0 { a.get(c, y, x) } else { b.get(c, y, x) };
                    assert_eq!(out.get(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn mask_ratio_counts() {
        let m = BinaryMask::from_fn(256, 256, |x, y| y * 256 + x < 6553);
        assert_eq!(m.hole_count(), 6553);
        assert_eq!(m.ratio(), 6553.0 / 65536.0);
        assert!(m.ratio() < 0.1);
        assert_eq!(BinaryMask::ones(8, 8).ratio(), 1.0);
        assert_eq!(BinaryMask::zeros(8, 8).ratio(), 0.0);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(BinaryMask::new(2, 2, vec![0, 1, 2, 0]).is_err());
        assert!(LandmarkSet::new(vec![0.0; 135]).is_err());
        assert!(FaceImage::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn stack_channels_identical(points in proptest::collection::vec(-0.5f32..1.5, LANDMARK_VALUES)) {
            let s = rasterize_landmarks(&LandmarkSet::new(points).unwrap(), 128, 68);
            let t = s.to_tensor::<f32>();
            let plane = 128 * 128;
            for c in 1..68 {
                prop_assert_eq!(&t.data()[c * plane..(c + 1) * plane], &t.data()[..plane]);
            }
            prop_assert!(s.ones() >= 1 && s.ones() <= 68);
        }

        #[test]
        fn composite_preserves_known_pixels(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gen = FaceImage::new(8, 8, (0..192).map(|_| rng.gen::<f32>()).collect()).unwrap();
            let orig = FaceImage::new(8, 8, (0..192).map(|_| rng.gen::<f32>()).collect()).unwrap();
            let mask = BinaryMask::new(8, 8, (0..64).map(|_| rng.gen_range(0..2u8)).collect()).unwrap();
            let out = composite(&gen, &orig, &mask).unwrap();
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        if !mask.is_hole(x, y) {
                            prop_assert_eq!(out.get(c, y, x).to_bits(), orig.get(c, y, x).to_bits());
                        }
                    }
                }
            }
        }
    }
}
