//! Inference on a trained generator: single requests and the batch test flow.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{self, FileList};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics;
use crate::model::{Generator, ModelConfig, ParamStore};
use crate::training::GENERATOR;
use crate::types::{BinaryMask, FaceImage, LandmarkSet};

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub inpainted: FaceImage,
    pub landmarks: LandmarkSet,
    pub latency_ms: f64,
    /// Hash of the checkpoint the model came from.
    pub model_id: String,
    /// The mask had no hole pixels; `inpainted` is the input unchanged.
    pub no_op: bool,
    pub warnings: Vec<String>,
}

/// A generator with fixed weights. Read-only, so it can be shared between
/// threads.
pub struct InpaintModel {
    generator: Generator,
    params: ParamStore<f32>,
    id: String,
}

impl InpaintModel {
    pub fn new(generator: Generator, params: ParamStore<f32>, id: impl Into<String>) -> Result<Self> {
        params.validate(&generator.specs())?;
        Ok(InpaintModel { generator, params, id: id.into() })
    }

    pub fn from_checkpoint(c: &Checkpoint, id: impl Into<String>) -> Result<Self> {
        let generator = Generator::new(c.model.clone())?;
        Self::new(generator, c.store(GENERATOR), id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (c, hash) = Checkpoint::load(path)?;
        Self::from_checkpoint(&c, hash)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &ModelConfig {
        self.generator.config()
    }

    pub fn image_size(&self) -> usize {
        self.config().image_size
    }

    /// Inpaints an image already at the model resolution.
    pub fn infer(&self, image: &FaceImage, mask: &BinaryMask) -> Result<InferenceResult> {
        let s = self.image_size();
        if (image.width(), image.height(), mask.width(), mask.height()) != (s, s, s, s) {
            return Err(Error::Shape(format!(
                "model expects {s}x{s}; got image {}x{} and mask {}x{}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        let start = Instant::now();
        let (raw, landmarks, warnings) = self.run(image, mask)?;
        let no_op = mask.hole_count() == 0;
        let inpainted = if no_op { image.clone() } else { composite(image, &raw, mask) };
        Ok(self.result(inpainted, landmarks, start, no_op, warnings))
    }

    /// Inpaints an image of any size: the model runs on a resized copy and
    /// its hole content is resized back and composited at the original
    /// resolution, so known pixels are returned untouched.
    pub fn infer_native(&self, image: &FaceImage, mask: &BinaryMask) -> Result<InferenceResult> {
        let (w, h) = (image.width(), image.height());
        if (mask.width(), mask.height()) != (w, h) {
            return Err(Error::Shape(format!("image is {w}x{h} but mask is {}x{}", mask.width(), mask.height())));
        }
        let s = self.image_size();
        if (w, h) == (s, s) {
            return self.infer(image, mask);
        }
        let start = Instant::now();
        let small = data::resize_image(image, s, s);
        let small_mask = data::resize_mask(mask, s, s);
        let (raw, landmarks, mut warnings) = self.run(&small, &small_mask)?;
        let no_op = mask.hole_count() == 0;
        if small_mask.hole_count() == 0 && !no_op {
            warnings.push(format!("hole vanishes when resized to {s}x{s}; filled from an unconditioned pass"));
        }
        let inpainted = if no_op { image.clone() } else { composite(image, &data::resize_image(&raw, w, h), mask) };
        Ok(self.result(inpainted, landmarks, start, no_op, warnings))
    }

    fn run(&self, image: &FaceImage, mask: &BinaryMask) -> Result<(FaceImage, LandmarkSet, Vec<String>)> {
        let mut g = Graph::<f32>::new();
        let images = image.to_tensor::<f32>().reshape(&[1, 3, image.height(), image.width()])?;
        let out = self.generator.forward(&mut g, &self.params, &images, std::slice::from_ref(mask))?;
        let raw = FaceImage::from_tensor(&g.value(out.raw).index0(0))?;
        let landmarks = LandmarkSet::new(g.value(out.landmarks).data().to_vec())?;
        Ok((raw, landmarks, g.warnings().to_vec()))
    }

    fn result(&self, inpainted: FaceImage, landmarks: LandmarkSet, start: Instant, no_op: bool, warnings: Vec<String>) -> InferenceResult {
        for w in &warnings {
            log::warn!("{w}");
        }
        InferenceResult {
            inpainted,
            landmarks,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            model_id: self.id.clone(),
            no_op,
            warnings,
        }
    }
}

/// `generated` inside the hole, `image` elsewhere (copied, not recomputed).
pub fn composite(image: &FaceImage, generated: &FaceImage, mask: &BinaryMask) -> FaceImage {
    let plane = image.width() * image.height();
    let mut px = image.pixels().to_vec();
    for c in 0..3 {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                px[c * plane + i] = generated.pixels()[c * plane + i];
            }
        }
    }
    FaceImage::new(image.width(), image.height(), px).expect("composite keeps shape")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestSummary {
    pub written: usize,
    pub skipped: usize,
    pub mean_latency_ms: f64,
    /// Mean hole-region PSNR against the input image.
    pub psnr: Option<f64>,
    /// Mean landmark distance, when reference landmarks were given.
    pub landmark_error: Option<f64>,
}

/// Runs every (image, mask) record and writes `<stem>.png` plus a landmark
/// file `<stem>.txt` into `out_dir`. Unreadable records are logged and
/// skipped.
pub fn batch_test(
    model: &InpaintModel,
    images: &FileList,
    masks: &FileList,
    landmarks: Option<&FileList>,
    out_dir: &Path,
) -> Result<TestSummary> {
    if images.len() != masks.len() {
        return Err(Error::Config(format!("{} test images but {} masks", images.len(), masks.len())));
    }
    if let Some(l) = landmarks {
        if l.len() != images.len() {
            return Err(Error::Config(format!("{} test images but {} landmark files", images.len(), l.len())));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut names = HashSet::new();
    let (mut written, mut skipped) = (0, 0);
    let (mut latency, mut psnr, mut lm_err, mut lm_n) = (0.0, 0.0, 0.0, 0usize);
    for (i, (img_path, mask_path)) in images.iter().zip(masks.iter()).enumerate() {
        let record = || -> Result<(InferenceResult, FaceImage, BinaryMask)> {
            let img = data::read_image(img_path)?;
            let mask = data::resize_mask(&data::read_mask(mask_path)?, img.width(), img.height());
            Ok((model.infer_native(&img, &mask)?, img, mask))
        };
        let (res, img, mask) = match record() {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping record {i} ({}): {e}", img_path.display());
                skipped += 1;
                continue;
            }
        };
        let stem = unique_stem(&mut names, img_path, i);
        let png = out_dir.join(format!("{stem}.png"));
        res.inpainted.to_rgb8().save(&png).map_err(|e| Error::Decode { path: png.clone(), reason: e.to_string() })?;
        data::write_landmarks(&out_dir.join(format!("{stem}.txt")), &res.landmarks, img.width(), img.height())?;
        latency += res.latency_ms;
        psnr += metrics::masked_psnr(&res.inpainted, &img, &mask)?;
        if let Some(l) = landmarks {
            match data::load_landmarks(&l.0[i]) {
                Ok(truth) => {
                    lm_err += res.landmarks.mean_distance(&truth);
                    lm_n += 1;
                }
                Err(e) => log::warn!("no reference landmarks for record {i}: {e}"),
            }
        }
        written += 1;
    }
    let n = written.max(1) as f64;
    let summary = TestSummary {
        written,
        skipped,
        mean_latency_ms: latency / n,
        psnr: (written > 0).then(|| psnr / n),
        landmark_error: (lm_n > 0).then(|| lm_err / lm_n as f64),
    };
    log::info!("tested {written} records ({skipped} skipped), mean latency {:.1} ms", summary.mean_latency_ms);
    Ok(summary)
}

fn unique_stem(seen: &mut HashSet<String>, path: &PathBuf, index: usize) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("{index:05}"));
    if seen.insert(stem.clone()) {
        return stem;
    }
    let alt = format!("{stem}_{index:05}");
    seen.insert(alt.clone());
    alt
}
