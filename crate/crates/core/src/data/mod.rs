//! Dataset ingestion: file lists, decoding and resizing, mask grouping and
//! seeded batching.

mod batch;
mod masks;
pub mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::tensor::resize_bilinear;
use crate::types::{BinaryMask, FaceImage, LandmarkSet, IMAGE_SIZE, LANDMARK_VALUES};

pub use batch::{Batch, BatchIndices, Batches, Dataset, DEFAULT_BATCH_SIZE};
pub use masks::{group_and_sample, group_and_sample_masks, group_of, MaskGroup, MaskSplit};

/// Ordered list of record paths.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileList(pub Vec<PathBuf>);

impl FileList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PathBuf> {
        self.0.iter()
    }

    /// One path per line, LF-terminated.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for p in &self.0 {
            text.push_str(&p.to_string_lossy());
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a list; relative entries are resolved against `root`. Every
    /// entry must exist and appear once.
    pub fn read(path: &Path, root: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let p = match root {
                Some(r) if Path::new(line).is_relative() => r.join(line),
                _ => PathBuf::from(line),
            };
            if !p.exists() {
                return Err(Error::Config(format!("{}: listed file {} does not exist", path.display(), p.display())));
            }
            if !seen.insert(p.clone()) {
                return Err(Error::Config(format!("{}: duplicate entry {}", path.display(), p.display())));
            }
            out.push(p);
        }
        Ok(FileList(out))
    }
}

impl IntoIterator for FileList {
    type Item = PathBuf;
    type IntoIter = std::vec::IntoIter<PathBuf>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

/// Default extensions picked up by `build_flist`.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Recursively lists files under `root` whose extension (case-insensitive)
/// is in `extensions`, sorted lexicographically.
pub fn build_flist(root: &Path, extensions: &[&str]) -> Result<FileList> {
    let mut out = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into_io_error().unwrap_or_else(|| std::io::Error::other("directory walk failed")))
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext = entry.path().extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(&e))) {
            out.push(entry.into_path());
        }
    }
    out.sort();
    if out.is_empty() {
        log::warn!("no files matching {extensions:?} under {}", root.display());
    }
    Ok(FileList(out))
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })
}

/// Decodes an RGB image at its own resolution, values in [0, 1].
pub fn read_image(path: &Path) -> Result<FaceImage> {
    Ok(FaceImage::from_rgb8(&decode(path)?.to_rgb8()))
}

/// Decodes an RGB image, bilinearly resized to `size x size`, in [0, 1].
pub fn load_image_sized(path: &Path, size: usize) -> Result<FaceImage> {
    Ok(resize_image(&read_image(path)?, size, size))
}

/// `load_image_sized` at the model resolution.
pub fn load_image(path: &Path) -> Result<FaceImage> {
    load_image_sized(path, IMAGE_SIZE)
}

/// Bilinear resize; returns an identical copy when the size already matches.
pub fn resize_image(img: &FaceImage, width: usize, height: usize) -> FaceImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let px = resize_bilinear(img.pixels(), 3, img.height(), img.width(), height, width);
    FaceImage::new(width, height, px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("resized image shape")
}

/// Nearest-neighbour resize of a mask (centre sampling).
pub fn resize_mask(mask: &BinaryMask, width: usize, height: usize) -> BinaryMask {
    if mask.width() == width && mask.height() == height {
        return mask.clone();
    }
    let (sw, sh) = (mask.width(), mask.height());
    BinaryMask::from_fn(width, height, |x, y| {
        let sx = ((x * 2 + 1) * sw / (2 * width)).min(sw - 1);
        let sy = ((y * 2 + 1) * sh / (2 * height)).min(sh - 1);
        mask.is_hole(sx, sy)
    })
}

/// Decodes a grayscale mask (white = hole), nearest-resized to `size` and
/// thresholded at 0.5.
pub fn load_mask_sized(path: &Path, size: usize) -> Result<BinaryMask> {
    Ok(resize_mask(&read_mask(path)?, size, size))
}

/// Decodes a grayscale mask at its own resolution (white = hole).
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(mask_from_luma(&decode(path)?.to_luma8()))
}

/// Thresholds an 8-bit grayscale image at 0.5.
pub fn mask_from_luma(gray: &image::GrayImage) -> BinaryMask {
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.pixels().map(|p| (p.0[0] as f32 / 255.0 >= 0.5) as u8).collect();
    BinaryMask::new(w, h, data).expect("mask from image dimensions")
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    load_mask_sized(path, IMAGE_SIZE)
}

/// Parses a landmark file: line 1 is the source "W H", then 136 numbers
/// in source pixel coordinates. Returns normalized coordinates.
pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text).map_err(|reason| Error::Landmarks { path: path.to_path_buf(), reason })
}

pub fn parse_landmarks(text: &str) -> std::result::Result<LandmarkSet, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty file")?;
    let dims: Vec<f64> = header.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| format!("bad size header: {e}"))?;
    let [w, h] = dims[..] else {
        return Err(format!("size header needs 2 numbers, got {}", dims.len()));
    };
    if !(w > 0.0 && h > 0.0) {
        return Err(format!("source size {w}x{h} must be positive"));
    }
    let values: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad coordinate: {e}"))?;
    if values.len() != LANDMARK_VALUES {
        return Err(format!("expected {LANDMARK_VALUES} values, got {}", values.len()));
    }
    let norm = values.iter().enumerate().map(|(i, v)| (v / if i % 2 == 0 { w } else { h }) as f32).collect();
    LandmarkSet::new(norm).map_err(|e| e.to_string())
}

/// Writes landmarks in the format read by `load_landmarks`, scaled to a
/// `width x height` source.
pub fn write_landmarks(path: &Path, landmarks: &LandmarkSet, width: usize, height: usize) -> Result<()> {
    let coords: Vec<String> = landmarks
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{}", v as f64 * if i % 2 == 0 { width } else { height } as f64))
        .collect();
    fs::write(path, format!("{width} {height}\n{}\n", coords.join(" "))).map_err(|e| Error::io(path, e))
}
