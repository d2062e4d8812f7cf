use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{load_mask, FileList};
use crate::error::{Error, Result};

/// Hole-ratio bands. Intervals are half-open on the left edge and G3 is
/// closed at 0.6: `[0, .2)`, `[.2, .4)`, `[.4, .6]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskGroup {
    G1,
    G2,
    G3,
}

impl MaskGroup {
    pub const ALL: [MaskGroup; 3] = [MaskGroup::G1, MaskGroup::G2, MaskGroup::G3];

    pub fn name(self) -> &'static str {
        match self {
            MaskGroup::G1 => "G1",
            MaskGroup::G2 => "G2",
            MaskGroup::G3 => "G3",
        }
    }
}

/// Group for a hole ratio; empty masks and ratios above 0.6 belong nowhere.
pub fn group_of(ratio: f64) -> Option<MaskGroup> {
    if !(ratio > 0.0) {
        None
    } else if ratio < 0.2 {
        Some(MaskGroup::G1)
    } else if ratio < 0.4 {
        Some(MaskGroup::G2)
    } else if ratio <= 0.6 {
        Some(MaskGroup::G3)
    } else {
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskSplit {
    pub train: FileList,
    pub val: FileList,
    /// Sampled `(train, val)` members per group, in `MaskGroup::ALL` order.
    pub groups: Vec<(MaskGroup, Vec<PathBuf>, Vec<PathBuf>)>,
    /// Masks outside every group.
    pub discarded: Vec<PathBuf>,
}

/// Groups `(path, ratio)` entries and draws a seeded sample of
/// `n_train + n_val` per group without replacement.
pub fn group_and_sample(entries: &[(PathBuf, f64)], n_train: usize, n_val: usize, seed: u64) -> Result<MaskSplit> {
    let mut members: [Vec<PathBuf>; 3] = Default::default();
    let mut split = MaskSplit::default();
    for (path, ratio) in entries {
        match group_of(*ratio) {
            Some(g) => members[g as usize].push(path.clone()),
            None => split.discarded.push(path.clone()),
        }
    }
    split.discarded.sort();
    let needed = n_train + n_val;
    for group in MaskGroup::ALL {
        let pool = &mut members[group as usize];
        if pool.len() < needed {
            return Err(Error::InsufficientMasks { group: group.name().into(), needed, found: pool.len() });
        }
        // input order must not matter
        pool.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(group as u64);
        let (picked, _) = pool.partial_shuffle(&mut rng, needed);
        let train = picked[..n_train].to_vec();
        let val = picked[n_train..].to_vec();
        split.train.0.extend(train.iter().cloned());
        split.val.0.extend(val.iter().cloned());
        split.groups.push((group, train, val));
    }
    Ok(split)
}

/// Loads each mask to measure its ratio, then `group_and_sample`.
/// Undecodable masks are logged and skipped.
pub fn group_and_sample_masks(masks: &FileList, n_train: usize, n_val: usize, seed: u64) -> Result<MaskSplit> {
    let mut entries = Vec::with_capacity(masks.len());
    for p in masks.iter() {
        match load_mask(p) {
            Ok(m) => entries.push((p.clone(), m.ratio())),
            Err(e) => log::error!("skipping mask: {e}"),
        }
    }
    group_and_sample(&entries, n_train, n_val, seed)
}
