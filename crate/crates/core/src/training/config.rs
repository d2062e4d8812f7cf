use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{ExtractorConfig, LossWeights, Term};
use crate::model::ModelConfig;
use crate::training::search::{Dim, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Full,
    Reduced,
}

/// Dataset file lists and the run directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPaths {
    pub train_images: Option<PathBuf>,
    pub train_landmarks: Option<PathBuf>,
    pub train_masks: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_landmarks: Option<PathBuf>,
    pub val_masks: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_landmarks: Option<PathBuf>,
    pub test_masks: Option<PathBuf>,
    pub output_dir: PathBuf,
}

/// Everything a training run needs. Read from a flat `key: value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub scale: Scale,
    /// Overrides the scale's residual block count.
    pub residual_blocks: Option<usize>,
    /// Generator learning rate.
    pub lr: f64,
    /// Discriminator learning rate as a multiple of `lr`.
    pub d_lr_ratio: f64,
    /// Both learning rates are multiplied by `lr_decay` every
    /// `lr_decay_interval` iterations.
    pub lr_decay: f64,
    pub lr_decay_interval: u64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub weights: LossWeights,
    /// Pixel-loss weight of hole pixels relative to known ones.
    pub hole_weight: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub validation_interval: u64,
    pub extractor: ExtractorConfig,
    pub search: SearchSpace,
    pub paths: DataPaths,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            scale: Scale::Full,
            residual_blocks: None,
            lr: 1e-4,
            d_lr_ratio: 0.1,
            lr_decay: 1.0,
            lr_decay_interval: 100_000,
            batch_size: 4,
            max_iterations: 1000,
            weights: LossWeights::default(),
            hole_weight: 1.0,
            seed: 0,
            checkpoint_interval: 1000,
            validation_interval: 1000,
            extractor: ExtractorConfig::default(),
            search: SearchSpace::default(),
            paths: DataPaths { output_dir: PathBuf::from("runs"), ..Default::default() },
        }
    }
}

const WEIGHT_KEYS: [(&str, Term); 6] = [
    ("pixel_weight", Term::Pixel),
    ("landmark_weight", Term::Landmark),
    ("tv_weight", Term::Tv),
    ("style_weight", Term::Style),
    ("perceptual_weight", Term::Perceptual),
    ("adversarial_weight", Term::Adversarial),
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainingConfig {
    /// Reduced-scale defaults used by tests and demos.
    pub fn reduced() -> Self {
        TrainingConfig { scale: Scale::Reduced, ..Default::default() }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = match self.scale {
            Scale::Full => ModelConfig::full(),
            Scale::Reduced => ModelConfig::reduced(),
        };
        if let Some(b) = self.residual_blocks {
            m.residual_blocks = b;
        }
        m
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    /// Parses `key: value` lines over the defaults. `#` starts a comment.
    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut c = TrainingConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| Error::Config(format!("line {}: expected `key: value`", n + 1)))?;
            c.set(k.trim(), v.trim(), base).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key; the same keys are accepted on the command line.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let path = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        if let Some(&(_, term)) = WEIGHT_KEYS.iter().find(|(k, _)| *k == key) {
            self.weights.set(term, num(key, value)?);
            return Ok(());
        }
        match key {
            "scale" => {
                self.scale = match value {
                    "full" => Scale::Full,
                    "reduced" => Scale::Reduced,
                    _ => return Err(Error::Config(format!("scale must be `full` or `reduced`, got {value:?}"))),
                }
            }
            "residual_blocks" => self.residual_blocks = Some(num(key, value)?),
            "lr" => self.lr = num(key, value)?,
            "d_lr_ratio" => self.d_lr_ratio = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "lr_decay_interval" => self.lr_decay_interval = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_iterations" => self.max_iterations = num(key, value)?,
            "hole_weight" => self.hole_weight = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "validation_interval" => self.validation_interval = num(key, value)?,
            "extractor" => {
                self.extractor = match value {
                    "identity" => ExtractorConfig::Identity,
                    "conv" => match &self.extractor {
                        ExtractorConfig::Conv { .. } => self.extractor.clone(),
                        ExtractorConfig::Identity => ExtractorConfig::default(),
                    },
                    _ => return Err(Error::Config(format!("extractor must be `conv` or `identity`, got {value:?}"))),
                }
            }
            "extractor_widths" | "extractor_layers" | "extractor_seed" => {
                let ExtractorConfig::Conv { widths, layers, seed } = &mut self.extractor else {
                    return Err(Error::Config(format!("{key} requires `extractor: conv` earlier in the file")));
                };
                match key {
                    "extractor_widths" => *widths = list(key, value)?,
                    "extractor_layers" => *layers = list(key, value)?,
                    _ => *seed = num(key, value)?,
                }
            }
            "search_landmark_weight" => self.search.landmark_weight = Dim::parse(value)?,
            "search_lr" => self.search.lr = Dim::parse(value)?,
            "search_lr_decay" => self.search.lr_decay = Dim::parse(value)?,
            "search_batch_size" => self.search.batch_size = Dim::parse(value)?,
            "train_images" => self.paths.train_images = Some(path(value)),
            "train_landmarks" => self.paths.train_landmarks = Some(path(value)),
            "train_masks" => self.paths.train_masks = Some(path(value)),
            "val_images" => self.paths.val_images = Some(path(value)),
            "val_landmarks" => self.paths.val_landmarks = Some(path(value)),
            "val_masks" => self.paths.val_masks = Some(path(value)),
            "test_images" => self.paths.test_images = Some(path(value)),
            "test_landmarks" => self.paths.test_landmarks = Some(path(value)),
            "test_masks" => self.paths.test_masks = Some(path(value)),
            "output_dir" => self.paths.output_dir = path(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.d_lr_ratio >= 0.0 && self.d_lr_ratio.is_finite()) {
            return fail(format!("d_lr_ratio must be >= 0, got {}", self.d_lr_ratio));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.max_iterations == 0 {
            return fail("batch_size and max_iterations must be at least 1".into());
        }
        if self.lr_decay_interval == 0 || self.checkpoint_interval == 0 || self.validation_interval == 0 {
            return fail("intervals must be at least 1".into());
        }
        if !(self.hole_weight >= 0.0 && self.hole_weight.is_finite()) {
            return fail(format!("hole_weight must be >= 0, got {}", self.hole_weight));
        }
        self.weights.validate()?;
        if Term::ALL.iter().all(|&t| self.weights.get(t) == 0.0) {
            return fail("at least one loss weight must be positive".into());
        }
        self.model_config().validate()?;
        crate::losses::FeatureExtractor::<f32>::specs(&self.extractor)?;
        Ok(())
    }

    /// Learning rate of the generator at iteration `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        self.lr * self.lr_decay.powi((t / self.lr_decay_interval) as i32)
    }

    /// Serializes every key in the file format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("scale", if self.scale == Scale::Full { "full" } else { "reduced" }.into());
        if let Some(b) = self.residual_blocks {
            kv("residual_blocks", b.to_string());
        }
        kv("lr", self.lr.to_string());
        kv("d_lr_ratio", self.d_lr_ratio.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("lr_decay_interval", self.lr_decay_interval.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_iterations", self.max_iterations.to_string());
        for (k, t) in WEIGHT_KEYS {
            kv(k, self.weights.get(t).to_string());
        }
        kv("hole_weight", self.hole_weight.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("validation_interval", self.validation_interval.to_string());
        match &self.extractor {
            ExtractorConfig::Identity => kv("extractor", "identity".into()),
            ExtractorConfig::Conv { widths, layers, seed } => {
                kv("extractor", "conv".into());
                kv("extractor_widths", join(widths));
                kv("extractor_layers", join(layers));
                kv("extractor_seed", seed.to_string());
            }
        }
        kv("search_landmark_weight", self.search.landmark_weight.to_string());
        kv("search_lr", self.search.lr.to_string());
        kv("search_lr_decay", self.search.lr_decay.to_string());
        kv("search_batch_size", self.search.batch_size.to_string());
        let p = &self.paths;
        for (k, v) in [
            ("train_images", &p.train_images),
            ("train_landmarks", &p.train_landmarks),
            ("train_masks", &p.train_masks),
            ("val_images", &p.val_images),
            ("val_landmarks", &p.val_landmarks),
            ("val_masks", &p.val_masks),
            ("test_images", &p.test_images),
            ("test_landmarks", &p.test_landmarks),
            ("test_masks", &p.test_masks),
        ] {
            if let Some(v) = v {
                kv(k, v.display().to_string());
            }
        }
        kv("output_dir", p.output_dir.display().to_string());
        s
    }
}
