use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{load_image_sized, load_landmarks, load_mask_sized, FileList};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::types::{BinaryMask, FaceImage, LandmarkSet, LANDMARK_VALUES};

pub const DEFAULT_BATCH_SIZE: usize = 4;

/// Decoded records held in memory. Image `i` pairs with landmark set `i`;
/// masks are a separate pool.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<FaceImage>,
    pub landmarks: Vec<LandmarkSet>,
    pub masks: Vec<BinaryMask>,
}

impl Dataset {
    pub fn new(images: Vec<FaceImage>, landmarks: Vec<LandmarkSet>, masks: Vec<BinaryMask>) -> Result<Self> {
        if images.len() != landmarks.len() {
            return Err(Error::Config(format!("{} images but {} landmark files", images.len(), landmarks.len())));
        }
        if images.is_empty() {
            return Err(Error::EmptyDataset("no image records".into()));
        }
        if masks.is_empty() {
            return Err(Error::EmptyDataset("no masks".into()));
        }
        let (w, h) = (images[0].width(), images[0].height());
        if images.iter().any(|i| i.width() != w || i.height() != h) || masks.iter().any(|m| m.width() != w || m.height() != h) {
            return Err(Error::Shape(format!("all images and masks must be {w}x{h}")));
        }
        Ok(Dataset { images, landmarks, masks })
    }

    /// Loads aligned image/landmark lists and a mask list at `size`.
    /// Records that fail to decode are logged and skipped (image and
    /// landmarks together); the skip count is returned.
    pub fn load(images: &FileList, landmarks: &FileList, masks: &FileList, size: usize) -> Result<(Self, usize)> {
        if images.len() != landmarks.len() {
            return Err(Error::Config(format!("image list has {} entries, landmark list {}", images.len(), landmarks.len())));
        }
        let mut skipped = 0;
        let (mut imgs, mut lms) = (Vec::new(), Vec::new());
        for (ip, lp) in images.iter().zip(landmarks.iter()) {
            match load_image_sized(ip, size).and_then(|i| Ok((i, load_landmarks(lp)?))) {
                Ok((i, l)) => {
                    imgs.push(i);
                    lms.push(l);
                }
                Err(e) => {
                    log::error!("skipping record: {e}");
                    skipped += 1;
                }
            }
        }
        let mut ms = Vec::new();
        for p in masks.iter() {
            match load_mask_sized(p, size) {
                Ok(m) => ms.push(m),
                Err(e) => {
                    log::error!("skipping mask: {e}");
                    skipped += 1;
                }
            }
        }
        Ok((Dataset::new(imgs, lms, ms)?, skipped))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images[0].width()
    }

    pub fn batch<T: Real>(&self, idx: &BatchIndices) -> Result<Batch<T>> {
        let size = self.image_size();
        let mut px = Vec::with_capacity(idx.records.len() * 3 * size * size);
        let mut lm = Vec::with_capacity(idx.records.len() * LANDMARK_VALUES);
        for &r in &idx.records {
            px.extend(self.images[r].pixels().iter().map(|&v| T::c(v as f64)));
            lm.extend(self.landmarks[r].values().iter().map(|&v| T::c(v as f64)));
        }
        let n = idx.records.len();
        Ok(Batch {
            images: Tensor::from_vec(&[n, 3, size, size], px)?,
            landmarks: Tensor::from_vec(&[n, LANDMARK_VALUES], lm)?,
            masks: idx.masks.iter().map(|&m| self.masks[m].clone()).collect(),
            records: idx.records.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[N, 3, S, S]`.
    pub images: Tensor<T>,
    /// `[N, 136]` ground-truth landmarks.
    pub landmarks: Tensor<T>,
    pub masks: Vec<BinaryMask>,
    /// Source record of each sample.
    pub records: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub step: u64,
    pub epoch: u64,
    pub records: Vec<usize>,
    pub masks: Vec<usize>,
}

/// Seeded, epoch-aware batch schedule. Each epoch is a fresh permutation of
/// the records cut into full batches (a trailing partial batch is dropped);
/// each sample draws its mask independently. `at(step)` is a pure function,
/// so a resumed run sees the same batches.
#[derive(Debug, Clone)]
pub struct Batches {
    records: usize,
    masks: usize,
    batch_size: usize,
    seed: u64,
}

impl Batches {
    pub fn new(records: usize, masks: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if records < batch_size {
            return Err(Error::EmptyDataset(format!("{records} records cannot fill a batch of {batch_size}")));
        }
        if masks == 0 {
            return Err(Error::EmptyDataset("no masks".into()));
        }
        Ok(Batches { records, masks, batch_size, seed })
    }

    pub fn for_dataset(data: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        Self::new(data.len(), data.masks.len(), batch_size, seed)
    }

    pub fn per_epoch(&self) -> usize {
        self.records / self.batch_size
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn at(&self, step: u64) -> BatchIndices {
        let per_epoch = self.per_epoch() as u64;
        let epoch = step / per_epoch;
        let pos = (step % per_epoch) as usize;

        let mut order: Vec<usize> = (0..self.records).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * epoch);
        order.shuffle(&mut rng);
        let records = order[pos * self.batch_size..(pos + 1) * self.batch_size].to_vec();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * step + 1);
        let masks = (0..self.batch_size).map(|_| rng.gen_range(0..self.masks)).collect();
        BatchIndices { step, epoch, records, masks }
    }

    /// Batches from `start` onward.
    pub fn iter_from(&self, start: u64) -> impl Iterator<Item = BatchIndices> + '_ {
        (start..).map(move |s| self.at(s))
    }
}
