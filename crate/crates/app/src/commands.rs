//! Subcommand implementations, kept out of `main` so tests can drive them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use inclg_core::data::{build_flist, group_and_sample_masks, load_landmarks, synthetic, Dataset, FileList};
use inclg_core::inference::{batch_test, InpaintModel, TestSummary};
use inclg_core::training::{hyperparameter_search, SearchResult, Trainer, TrainingConfig};

/// Applies `key=value` overrides on top of a loaded config.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<TrainingConfig> {
    let mut c = TrainingConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent();
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
        c.set(k.trim(), v.trim(), base)?;
    }
    c.validate()?;
    Ok(c)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("config is missing `{key}`"))
}

fn load_split(c: &TrainingConfig, images: &Option<PathBuf>, landmarks: &Option<PathBuf>, masks: &Option<PathBuf>, split: &str) -> Result<Dataset> {
    let read = |p: &Option<PathBuf>, kind: &str| -> Result<FileList> {
        let key = format!("{split}_{kind}");
        Ok(FileList::read(required(p, &key)?, None)?)
    };
    let size = c.model_config().image_size;
    let (ds, skipped) = Dataset::load(&read(images, "images")?, &read(landmarks, "landmarks")?, &read(masks, "masks")?, size)?;
    if skipped > 0 {
        log::warn!("{split}: skipped {skipped} unreadable records");
    }
    log::info!("{split}: {} records, {} masks at {size}x{size}", ds.len(), ds.masks.len());
    Ok(ds)
}

fn validation_split(c: &TrainingConfig) -> Result<Option<Dataset>> {
    let p = &c.paths;
    if p.val_images.is_none() {
        return Ok(None);
    }
    load_split(c, &p.val_images, &p.val_landmarks, &p.val_masks, "val").map(Some)
}

/// Trains from scratch or from `resume`; returns the output directory.
pub fn train(config: &TrainingConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let p = &config.paths;
    let data = load_split(config, &p.train_images, &p.train_landmarks, &p.train_masks, "train")?;
    let val = validation_split(config)?;
    let trainer = Trainer::new(config.clone())?;
    let state = match resume {
        Some(ckpt) => {
            let s = trainer.load_checkpoint(ckpt)?;
            log::info!("resuming from iteration {}", s.t);
            s
        }
        None => trainer.init_state(),
    };
    let out = p.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), config.to_text())?;
    let state = trainer.train_loop(state, &data, val.as_ref(), &out)?;
    if let Some((t, score)) = state.best_val {
        log::info!("best validation score {score:.5} at iteration {t}");
    }
    Ok(out)
}

/// Searches the config's search space; writes `trials.json` and
/// `best_config.txt` into the output directory.
pub fn tune(config: &TrainingConfig, trials: usize, trial_iterations: Option<u64>) -> Result<SearchResult> {
    let p = &config.paths;
    let data = load_split(config, &p.train_images, &p.train_landmarks, &p.train_masks, "train")?;
    let Some(val) = validation_split(config)? else {
        bail!("tuning needs a validation split (val_images, val_landmarks, val_masks)");
    };
    let result = hyperparameter_search(config, &config.search, trials, trial_iterations, &data, &val)?;
    fs::create_dir_all(&p.output_dir)?;
    fs::write(p.output_dir.join("trials.json"), serde_json::to_string_pretty(&result.trials)?)?;
    fs::write(p.output_dir.join("best_config.txt"), result.best.to_text())?;
    Ok(result)
}

/// Runs the test split through a checkpoint.
pub fn test(config: &TrainingConfig, checkpoint: &Path, out: &Path) -> Result<TestSummary> {
    let model = InpaintModel::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let p = &config.paths;
    let images = FileList::read(required(&p.test_images, "test_images")?, None)?;
    let masks = FileList::read(required(&p.test_masks, "test_masks")?, None)?;
    let landmarks = p.test_landmarks.as_deref().map(|l| FileList::read(l, None)).transpose()?;
    let summary = batch_test(&model, &images, &masks, landmarks.as_ref(), out)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn flist(root: &Path, out: &Path, extensions: &[String]) -> Result<usize> {
    let exts: Vec<&str> = extensions.iter().map(String::as_str).collect();
    let list = build_flist(root, &exts)?;
    list.write(out)?;
    Ok(list.len())
}

/// Groups masks by hole ratio and writes the sampled lists:
/// `train.flist`, `val.flist`, per-group lists and `discarded.flist`.
pub fn split_masks(masks: &Path, out: &Path, n_train: usize, n_val: usize, seed: u64) -> Result<()> {
    let list = FileList::read(masks, None)?;
    let split = group_and_sample_masks(&list, n_train, n_val, seed)?;
    fs::create_dir_all(out)?;
    split.train.write(&out.join("train.flist"))?;
    split.val.write(&out.join("val.flist"))?;
    for (g, train, val) in &split.groups {
        FileList(train.clone()).write(&out.join(format!("{}_train.flist", g.name())))?;
        FileList(val.clone()).write(&out.join(format!("{}_val.flist", g.name())))?;
    }
    FileList(split.discarded.clone()).write(&out.join("discarded.flist"))?;
    log::info!("{} train / {} val masks, {} discarded", split.train.len(), split.val.len(), split.discarded.len());
    Ok(())
}

/// Writes a synthetic face dataset plus a reduced-scale config that
/// trains on it, for trying the tools without real data.
pub fn synth(out: &Path, images: usize, masks: usize, size: usize, seed: u64) -> Result<PathBuf> {
    let mut c = TrainingConfig::reduced();
    if c.model_config().image_size != size {
        bail!("synthetic data must match the reduced model size {}", c.model_config().image_size);
    }
    if masks == 0 || images < c.batch_size {
        bail!("need at least one mask and {} images", c.batch_size);
    }
    fs::create_dir_all(out)?;
    // absolute, so the lists work from any directory
    let out = &out.canonicalize()?;
    let ds = synthetic::write_dataset(out, images, masks, size, seed)?;
    c.weights.style = 10.0;
    c.lr = 1e-3;
    c.max_iterations = 500;
    c.checkpoint_interval = 100;
    c.validation_interval = 100;
    let p = &mut c.paths;
    for (slot, path) in [
        (&mut p.train_images, &ds.images),
        (&mut p.train_landmarks, &ds.landmarks),
        (&mut p.train_masks, &ds.masks),
        (&mut p.val_images, &ds.images),
        (&mut p.val_landmarks, &ds.landmarks),
        (&mut p.val_masks, &ds.masks),
        (&mut p.test_images, &ds.images),
        (&mut p.test_landmarks, &ds.landmarks),
    ] {
        *slot = Some(path.clone());
    }
    // one mouth-region mask per test face
    let dir = out.join("test_masks");
    fs::create_dir_all(&dir)?;
    let mut test_masks = Vec::new();
    for (i, lp) in FileList::read(&ds.landmarks, None)?.iter().enumerate() {
        let mp = dir.join(format!("{i:05}.png"));
        synthetic::mouth_mask(&load_landmarks(lp)?, size).to_luma8().save(&mp)?;
        test_masks.push(mp);
    }
    FileList(test_masks).write(&out.join("test_masks.flist"))?;
    p.test_masks = Some(out.join("test_masks.flist"));
    p.output_dir = out.join("run");
    let cfg = out.join("config.txt");
    fs::write(&cfg, c.to_text())?;
    Ok(cfg)
}
