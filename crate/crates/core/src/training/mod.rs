//! Alternating adversarial optimization: a discriminator update on detached
//! generator output, then a generator update on the weighted objective.

mod config;
mod optim;
pub mod search;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{BatchIndices, Batches, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, FeatureExtractor, LossBundle, Term};
use crate::metrics;
use crate::model::{Discriminator, Generator, GeneratorOutput, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::types::{BinaryMask, FaceImage, LandmarkSet};

pub use config::{DataPaths, Scale, TrainingConfig};
pub use optim::Adam;
pub use search::{hyperparameter_search, trial_seed, Dim, SearchResult, SearchSpace, Trial};

/// Checkpoint sections.
pub const GENERATOR: &str = "generator";
pub const DISCRIMINATOR: &str = "discriminator";
const ADAM_G_M: &str = "adam_g.m";
const ADAM_G_V: &str = "adam_g.v";
const ADAM_D_M: &str = "adam_d.m";
const ADAM_D_V: &str = "adam_d.v";

/// Exponential moving average factor of the logged losses.
const RUNNING_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    /// Mean L1 between composite output and ground truth.
    pub pixel_loss: f64,
    /// Mean normalized point-to-point landmark distance.
    pub landmark_error: f64,
    /// Mean hole-region PSNR in dB.
    pub psnr: f64,
    pub count: usize,
}

impl ValidationMetrics {
    /// Search objective.
    pub fn score(&self) -> f64 {
        self.pixel_loss + self.landmark_error
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub t: u64,
    pub generator: ParamStore<f32>,
    pub discriminator: ParamStore<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Moving averages of the generator terms, `Term::ALL` order.
    pub running: [f64; 6],
    pub best_val: Option<(u64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub bundle: LossBundle,
    pub generator: f64,
    pub discriminator: f64,
    pub lr: f64,
}

/// Points at which `train_step` reports the state to an observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Start,
    AfterDiscriminator,
    AfterGenerator,
}

pub struct Trainer {
    pub config: TrainingConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: FeatureExtractor<f32>,
    g_keys: Vec<String>,
    d_keys: Vec<String>,
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model_config();
        let generator = Generator::new(model.clone())?;
        let discriminator = Discriminator::new(&model);
        let extractor = FeatureExtractor::new(&config.extractor)?;
        let g_keys = generator.specs().into_iter().filter(|s| s.trainable).map(|s| s.key).collect();
        let d_keys = discriminator.specs().into_iter().filter(|s| s.trainable).map(|s| s.key).collect();
        Ok(Trainer { config, generator, discriminator, extractor, g_keys, d_keys })
    }

    /// Fresh state with parameters drawn from the configured seed.
    pub fn init_state(&self) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        TrainState {
            t: 0,
            generator: self.generator.init_params(&mut rng),
            discriminator: self.discriminator.init_params(&mut rng),
            opt_g: Adam::default(),
            opt_d: Adam::default(),
            running: [0.0; 6],
            best_val: None,
        }
    }

    pub fn train_step(&self, state: &mut TrainState, data: &Dataset, idx: &BatchIndices) -> Result<StepLosses> {
        self.train_step_observed(state, data, idx, &mut |_, _| {})
    }

    /// `train_step`, calling `observe` at the start and after each sub-update.
    pub fn train_step_observed(
        &self,
        state: &mut TrainState,
        data: &Dataset,
        idx: &BatchIndices,
        observe: &mut dyn FnMut(Phase, &TrainState),
    ) -> Result<StepLosses> {
        let batch = data.batch::<f32>(idx)?;
        let lr = self.config.lr_at(state.t);
        let iteration = state.t + 1;
        observe(Phase::Start, state);

        let mut g = Graph::new();
        let out = self.generator.forward(&mut g, &state.generator, &batch.images, &batch.masks)?;

        // discriminator: generator output enters as a constant
        self.discriminator.power_iterate(&mut state.discriminator)?;
        let d_loss = {
            let mut gd = Graph::new();
            let real = gd.input(batch.images.clone());
            let fake = gd.constant(&Arc::new(g.value(out.image).clone()));
            let both = gd.concat_axis(&[real, fake], 0)?;
            let scores = self.discriminator.forward(&mut gd, &state.discriminator, both)?;
            let n = batch.masks.len();
            let real_s = gd.narrow(scores, 0, 0, n)?;
            let fake_s = gd.narrow(scores, 0, n, n)?;
            let l = losses::hinge_discriminator(&mut gd, real_s, fake_s)?;
            let value = gd.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { term: "discriminator".into(), iteration });
            }
            let grads = gd.backward(l).params(&gd);
            drop(gd);
            state.opt_d.update(&mut state.discriminator, &grads, &self.d_keys, lr * self.config.d_lr_ratio);
            value
        };
        observe(Phase::AfterDiscriminator, state);

        // generator: the discriminator is read, never written
        let (vars, total) =
            self.generator_objective(&mut g, &out, &batch.images, &batch.landmarks, &batch.masks, &state.discriminator, &self.extractor)?;
        let mut bundle = LossBundle::default();
        for (t, &v) in Term::ALL.iter().zip(&vars) {
            bundle.set(*t, g.value(v).item() as f64);
        }
        if let Some(t) = bundle.first_non_finite() {
            return Err(Error::NonFinite { term: t.name().into(), iteration });
        }
        let g_loss = g.value(total).item() as f64;
        let grads = g.backward(total).params(&g);
        drop(g);
        state.opt_g.update(&mut state.generator, &grads, &self.g_keys, lr);
        observe(Phase::AfterGenerator, state);

        state.t = iteration;
        for (r, t) in state.running.iter_mut().zip(Term::ALL) {
            let v = bundle.get(t).unwrap_or(0.0);
            *r = if iteration == 1 { v } else { RUNNING_DECAY * *r + (1.0 - RUNNING_DECAY) * v };
        }
        Ok(StepLosses { bundle, generator: g_loss, discriminator: d_loss, lr })
    }

    /// Generator loss terms (`Term::ALL` order) on a forward pass `out`,
    /// and their weighted sum over the nonzero weights.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_objective<T: Real>(
        &self,
        g: &mut Graph<T>,
        out: &GeneratorOutput,
        images: &Tensor<T>,
        landmarks: &Tensor<T>,
        masks: &[BinaryMask],
        discriminator: &ParamStore<T>,
        extractor: &FeatureExtractor<T>,
    ) -> Result<([Var; 6], Var)> {
        let target = g.input(images.clone());
        let weight = (self.config.hole_weight != 1.0).then(|| Arc::new(hole_weights(masks, self.config.hole_weight)));
        let pixel = losses::pixel_loss(g, out.raw, target, weight)?;
        let lm_target = g.input(landmarks.clone());
        let landmark = losses::landmark_loss(g, out.landmarks, lm_target)?;
        let tv = losses::tv_loss(g, out.raw)?;
        let acts = extractor.activations(g, out.raw)?;
        let target_acts = extractor.activations(g, target)?;
        let style = losses::style_loss_from(g, &acts, &target_acts)?;
        let perceptual = losses::perceptual_loss_from(g, &acts, &target_acts)?;
        let scores = self.discriminator.forward(g, discriminator, out.image)?;
        let adversarial = losses::hinge_generator(g, scores);
        let vars = [pixel, landmark, tv, style, perceptual, adversarial];
        let terms: Vec<_> =
            Term::ALL.iter().zip(&vars).map(|(&t, &v)| (v, self.config.weights.get(t))).filter(|&(_, w)| w != 0.0).collect();
        let total = g.weighted_sum(&terms)?;
        Ok((vars, total))
    }

    /// Deterministic metrics over every validation record; record `i` uses
    /// mask `i mod masks`.
    pub fn validate(&self, params: &ParamStore<f32>, val: &Dataset) -> Result<ValidationMetrics> {
        if val.is_empty() {
            return Err(Error::EmptyDataset("validation set".into()));
        }
        let idx: Vec<usize> = (0..val.len()).collect();
        let (mut pixel, mut lm, mut psnr) = (0.0, 0.0, 0.0);
        for chunk in idx.chunks(self.config.batch_size) {
            let bi = BatchIndices { step: 0, epoch: 0, records: chunk.to_vec(), masks: chunk.iter().map(|i| i % val.masks.len()).collect() };
            let batch = val.batch::<f32>(&bi)?;
            let mut g = Graph::new();
            let out = self.generator.forward(&mut g, params, &batch.images, &batch.masks)?;
            for (k, &r) in chunk.iter().enumerate() {
                let img = FaceImage::from_tensor(&g.value(out.image).index0(k))?;
                let truth = &val.images[r];
                pixel += metrics::mean_abs_diff(&img, truth)?;
                psnr += metrics::masked_psnr(&img, truth, &batch.masks[k])?;
                let pred = LandmarkSet::new(g.value(out.landmarks).index0(k).data().to_vec())?;
                lm += pred.mean_distance(&val.landmarks[r]);
            }
        }
        let n = val.len() as f64;
        Ok(ValidationMetrics { pixel_loss: pixel / n, landmark_error: lm / n, psnr: psnr / n, count: val.len() })
    }

    /// Runs iterations `state.t + 1 ..= max_iterations`, writing
    /// `iter_XXXXXX.ckpt` every `checkpoint_interval`, `final.ckpt` at the
    /// end, and a per-iteration CSV log. Validation (when `val` is given)
    /// runs every `validation_interval` and is logged separately.
    pub fn train_loop(&self, mut state: TrainState, data: &Dataset, val: Option<&Dataset>, out_dir: &Path) -> Result<TrainState> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let batches = Batches::for_dataset(data, self.config.batch_size, self.config.seed)?;
        let mut log = CsvLog::open(
            &out_dir.join("train_log.csv"),
            "iteration,pixel,landmark,tv,style,perceptual,adversarial,generator,discriminator,lr",
            state.t == 0,
        )?;
        let mut val_log = match val {
            Some(_) => Some(CsvLog::open(&out_dir.join("val_log.csv"), "iteration,pixel_loss,landmark_error,psnr", state.t == 0)?),
            None => None,
        };
        while state.t < self.config.max_iterations {
            let idx = batches.at(state.t);
            let l = self.train_step(&mut state, data, &idx)?;
            let terms: Vec<String> = Term::ALL.iter().map(|&t| l.bundle.get(t).unwrap_or(f64::NAN).to_string()).collect();
            log.row(&format!("{},{},{},{},{}", state.t, terms.join(","), l.generator, l.discriminator, l.lr))?;
            if state.t % self.config.checkpoint_interval == 0 {
                self.to_checkpoint(&state).save(&out_dir.join(format!("iter_{:06}.ckpt", state.t)))?;
            }
            if let (Some(v), Some(vl)) = (val, val_log.as_mut()) {
                if state.t % self.config.validation_interval == 0 {
                    let m = self.validate(&state.generator, v)?;
                    vl.row(&format!("{},{},{},{}", state.t, m.pixel_loss, m.landmark_error, m.psnr))?;
                    if state.best_val.map_or(true, |(_, s)| m.score() < s) {
                        state.best_val = Some((state.t, m.score()));
                    }
                }
            }
        }
        self.to_checkpoint(&state).save(&out_dir.join("final.ckpt"))?;
        Ok(state)
    }

    pub fn to_checkpoint(&self, state: &TrainState) -> Checkpoint {
        let mut c = Checkpoint::new(self.generator.config().clone());
        c.insert_store(GENERATOR, &state.generator);
        c.insert_store(DISCRIMINATOR, &state.discriminator);
        for (prefix, map) in [
            (ADAM_G_M, &state.opt_g.m),
            (ADAM_G_V, &state.opt_g.v),
            (ADAM_D_M, &state.opt_d.m),
            (ADAM_D_V, &state.opt_d.v),
        ] {
            for (k, v) in map {
                c.tensors.insert(format!("{prefix}/{k}"), v.clone());
            }
        }
        c.meta = serde_json::json!({
            "iteration": state.t,
            "adam_g": [state.opt_g.beta1, state.opt_g.beta2, state.opt_g.eps, state.opt_g.step],
            "adam_d": [state.opt_d.beta1, state.opt_d.beta2, state.opt_d.eps, state.opt_d.step],
            // bit patterns keep the round trip exact
            "running": state.running.map(f64::to_bits),
            "best_val": state.best_val.map(|(t, s)| (t, s.to_bits())),
            "config": self.config.to_text(),
        });
        c
    }

    /// Restores a state saved by `to_checkpoint`, checking every key and
    /// shape against this trainer's networks.
    pub fn state_from_checkpoint(&self, c: &Checkpoint) -> Result<TrainState> {
        let generator = c.store(GENERATOR);
        generator.validate(&self.generator.specs())?;
        let discriminator = c.store(DISCRIMINATOR);
        discriminator.validate(&self.discriminator.specs())?;
        let bad = |what: &str| Error::Checkpoint(format!("training metadata lacks {what}"));
        let meta = &c.meta;
        let adam = |key: &str, m: &str, v: &str| -> Result<Adam> {
            let a: (f64, f64, f64, u64) = serde_json::from_value(meta[key].clone()).map_err(|_| bad(key))?;
            let section = |p: &str| -> BTreeMap<String, Tensor<f32>> {
                c.store(p).iter().map(|(k, v)| (k.clone(), (**v).clone())).collect()
            };
            Ok(Adam { beta1: a.0, beta2: a.1, eps: a.2, step: a.3, m: section(m), v: section(v) })
        };
        let running: [u64; 6] = serde_json::from_value(meta["running"].clone()).map_err(|_| bad("running"))?;
        let best: Option<(u64, u64)> = serde_json::from_value(meta["best_val"].clone()).map_err(|_| bad("best_val"))?;
        Ok(TrainState {
            t: meta["iteration"].as_u64().ok_or_else(|| bad("iteration"))?,
            generator,
            discriminator,
            opt_g: adam("adam_g", ADAM_G_M, ADAM_G_V)?,
            opt_d: adam("adam_d", ADAM_D_M, ADAM_D_V)?,
            running: running.map(f64::from_bits),
            best_val: best.map(|(t, s)| (t, f64::from_bits(s))),
        })
    }

    pub fn save_checkpoint(&self, state: &TrainState, path: &Path) -> Result<String> {
        self.to_checkpoint(state).save(path)
    }

    pub fn load_checkpoint(&self, path: &Path) -> Result<TrainState> {
        let (c, _) = Checkpoint::load(path)?;
        if c.model != *self.generator.config() {
            // keys and shapes decide; the config only sharpens the message
            log::warn!("checkpoint {} was written for a different model configuration", path.display());
        }
        self.state_from_checkpoint(&c)
    }
}

/// Per-element pixel-loss weights: `hole` inside the hole, 1 elsewhere.
fn hole_weights<T: Real>(masks: &[BinaryMask], hole: f64) -> Tensor<T> {
    let (w, h) = (masks[0].width(), masks[0].height());
    let data = masks
        .iter()
        .flat_map(|m| (0..3).flat_map(move |_| m.data().iter().map(move |&v| T::c(if v == 1 { hole } else { 1.0 }))))
        .collect();
    Tensor::from_vec(&[masks.len(), 3, h, w], data).expect("mask shapes agree")
}

struct CsvLog {
    file: fs::File,
    path: PathBuf,
}

impl CsvLog {
    /// Opens for appending; a fresh log (or a missing file) gets the header.
    fn open(path: &Path, header: &str, fresh: bool) -> Result<Self> {
        let new = fresh || !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!new)
            .truncate(new)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if new {
            writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
        }
        Ok(CsvLog { file, path: path.to_path_buf() })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}
