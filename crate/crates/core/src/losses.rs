//! Generator and discriminator objectives.
//!
//! Every loss is a graph op so it can be differentiated; `LossBundle` holds
//! the plain values of one step for logging and aggregation.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::layers::Conv2d;
use crate::model::params::{Init, ParamSpec, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::types::LANDMARK_VALUES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Pixel,
    Landmark,
    Tv,
    Style,
    Perceptual,
    Adversarial,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Pixel, Term::Landmark, Term::Tv, Term::Style, Term::Perceptual, Term::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Term::Pixel => "pixel",
            Term::Landmark => "landmark",
            Term::Tv => "tv",
            Term::Style => "style",
            Term::Perceptual => "perceptual",
            Term::Adversarial => "adversarial",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-term weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub landmark: f64,
    pub tv: f64,
    pub style: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pixel: 1.0, landmark: 0.1, tv: 0.1, style: 250.0, perceptual: 0.1, adversarial: 0.1 }
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        LossWeights { pixel: w, landmark: w, tv: w, style: w, perceptual: w, adversarial: w }
    }

    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Pixel => self.pixel,
            Term::Landmark => self.landmark,
            Term::Tv => self.tv,
            Term::Style => self.style,
            Term::Perceptual => self.perceptual,
            Term::Adversarial => self.adversarial,
        }
    }

    pub fn set(&mut self, t: Term, w: f64) {
        match t {
            Term::Pixel => self.pixel = w,
            Term::Landmark => self.landmark = w,
            Term::Tv => self.tv = w,
            Term::Style => self.style = w,
            Term::Perceptual => self.perceptual = w,
            Term::Adversarial => self.adversarial = w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in Term::ALL {
            let w = self.get(t);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{t} loss weight must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Values of the six generator terms for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    values: [Option<f64>; 6],
}

impl LossBundle {
    pub fn from_values(values: [f64; 6]) -> Self {
        LossBundle { values: values.map(Some) }
    }

    pub fn set(&mut self, t: Term, v: f64) {
        self.values[t.index()] = Some(v);
    }

    pub fn get(&self, t: Term) -> Option<f64> {
        self.values[t.index()]
    }

    /// First term (in `Term::ALL` order) whose value is NaN or infinite.
    pub fn first_non_finite(&self) -> Option<Term> {
        Term::ALL.into_iter().find(|&t| self.get(t).is_some_and(|v| !v.is_finite()))
    }

    /// Weighted sum. Zero-weight terms are skipped outright, so they cannot
    /// leak a NaN into the total.
    pub fn aggregate(&self, weights: &LossWeights) -> Result<f64> {
        let mut total = 0.0;
        for t in Term::ALL {
            let v = self.get(t).ok_or_else(|| Error::Config(format!("loss bundle is missing the {t} term")))?;
            let w = weights.get(t);
            if w != 0.0 {
                total += w * v;
            }
        }
        Ok(total)
    }
}

/// Mean absolute difference, optionally weighted per element (a region
/// weight heavier inside the hole, say).
pub fn pixel_loss<T: Real>(g: &mut Graph<T>, x: Var, target: Var, weight: Option<Arc<Tensor<T>>>) -> Result<Var> {
    g.l1(x, target, weight)
}

/// Mean squared error over `[N, 136]` landmark vectors.
pub fn landmark_loss<T: Real>(g: &mut Graph<T>, k: Var, target: Var) -> Result<Var> {
    for v in [k, target] {
        let s = g.shape(v);
        if s.last() != Some(&LANDMARK_VALUES) {
            return Err(Error::Shape(format!("landmark loss expects {LANDMARK_VALUES} values per sample, got {s:?}")));
        }
    }
    g.mse(k, target)
}

pub fn tv_loss<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.tv(x)
}

/// Sum over layers of the L1 distance between normalized Gram matrices.
pub fn style_loss_from<T: Real>(g: &mut Graph<T>, acts: &[Var], targets: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(acts.len());
    for (&a, &b) in acts.iter().zip(targets) {
        let ga = g.gram(a)?;
        let gb = g.gram(b)?;
        terms.push((g.l1(ga, gb, None)?, 1.0));
    }
    g.weighted_sum(&terms)
}

/// Sum over layers of the L1 distance between activations.
pub fn perceptual_loss_from<T: Real>(g: &mut Graph<T>, acts: &[Var], targets: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(acts.len());
    for (&a, &b) in acts.iter().zip(targets) {
        terms.push((g.l1(a, b, None)?, 1.0));
    }
    g.weighted_sum(&terms)
}

pub fn style_loss<T: Real>(g: &mut Graph<T>, fx: &FeatureExtractor<T>, x: Var, target: Var) -> Result<Var> {
    let a = fx.activations(g, x)?;
    let b = fx.activations(g, target)?;
    style_loss_from(g, &a, &b)
}

pub fn perceptual_loss<T: Real>(g: &mut Graph<T>, fx: &FeatureExtractor<T>, x: Var, target: Var) -> Result<Var> {
    let a = fx.activations(g, x)?;
    let b = fx.activations(g, target)?;
    perceptual_loss_from(g, &a, &b)
}

/// Hinge generator term `-mean(fake)`.
pub fn hinge_generator<T: Real>(g: &mut Graph<T>, fake: Var) -> Var {
    let m = g.mean(fake);
    g.affine(m, -1.0, 0.0)
}

/// Hinge discriminator term `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_discriminator<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let r = g.affine(real, -1.0, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.affine(fake, 1.0, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f)
}

/// Per-channel statistics of the classification backbones the extractor
/// imitates; inputs in [0, 1] are standardized with them.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorConfig {
    /// The image itself is the only activation layer.
    Identity,
    /// Stack of conv3x3 + ReLU stages with 2x average pooling in between.
    Conv {
        widths: Vec<usize>,
        /// Stage indices whose activations are compared.
        layers: Vec<usize>,
        seed: u64,
    },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Conv { widths: vec![16, 32, 64, 128, 128], layers: vec![0, 1, 2, 3, 4], seed: 0x5eed }
    }
}

/// Frozen feature network for the style and perceptual terms.
#[derive(Debug, Clone)]
pub enum FeatureExtractor<T> {
    Identity,
    Conv(ConvExtractor<T>),
}

#[derive(Debug, Clone)]
pub struct ConvExtractor<T> {
    stages: Vec<Conv2d>,
    layers: Vec<usize>,
    params: ParamStore<T>,
}

impl<T: Real> FeatureExtractor<T> {
    /// Builds the extractor, drawing conv weights from the configured seed.
    pub fn new(config: &ExtractorConfig) -> Result<Self> {
        match config {
            ExtractorConfig::Identity => Ok(FeatureExtractor::Identity),
            ExtractorConfig::Conv { seed, .. } => {
                let specs = Self::specs(config)?;
                let params = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(*seed));
                Self::with_params(config, params)
            }
        }
    }

    /// Builds the extractor around externally supplied weights.
    pub fn with_params(config: &ExtractorConfig, params: ParamStore<T>) -> Result<Self> {
        match config {
            ExtractorConfig::Identity => Ok(FeatureExtractor::Identity),
            ExtractorConfig::Conv { widths, layers, .. } => {
                let specs = Self::specs(config)?;
                params.validate(&specs)?;
                Ok(FeatureExtractor::Conv(ConvExtractor { stages: stages(widths), layers: layers.clone(), params }))
            }
        }
    }

    pub fn specs(config: &ExtractorConfig) -> Result<Vec<ParamSpec>> {
        match config {
            ExtractorConfig::Identity => Ok(Vec::new()),
            ExtractorConfig::Conv { widths, layers, .. } => {
                if widths.is_empty() || widths.contains(&0) {
                    return Err(Error::Config(format!("extractor widths {widths:?} must be nonempty and positive")));
                }
                if layers.is_empty() {
                    return Err(Error::Config("extractor needs at least one layer".into()));
                }
                if let Some(&bad) = layers.iter().find(|&&l| l >= widths.len()) {
                    return Err(Error::Config(format!("extractor layer {bad} out of range for {} stages", widths.len())));
                }
                Ok(stages(widths)
                    .iter()
                    .flat_map(|s| {
                        let std = (2.0 / (9 * s.in_channels) as f64).sqrt();
                        vec![
                            ParamSpec::new(s.weight_key(), &s.weight_shape(), Init::Normal(std)),
                            ParamSpec::new(s.bias_key(), &[s.out_channels], Init::Zeros),
                        ]
                    })
                    .collect())
            }
        }
    }

    /// Activations at the configured layers, in increasing depth. Weights
    /// enter the graph as constants, so no gradient ever reaches them.
    pub fn activations(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let fx = match self {
            FeatureExtractor::Identity => return Ok(vec![x]),
            FeatureExtractor::Conv(fx) => fx,
        };
        if g.shape(x).get(1) != Some(&3) {
            return Err(Error::Shape(format!("extractor expects RGB input, got {:?}", g.shape(x))));
        }
        let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| -m / s).collect();
        let mut h = g.channel_affine(x, &scale, &shift)?;
        let deepest = *fx.layers.iter().max().expect("validated nonempty");
        let mut out = Vec::new();
        for (i, stage) in fx.stages.iter().enumerate().take(deepest + 1) {
            if i > 0 {
                h = g.avg_pool2(h)?;
            }
            let w = g.constant(fx.params.get(&stage.weight_key())?);
            let b = g.constant(fx.params.get(&stage.bias_key())?);
            h = stage.apply(g, h, w, Some(b))?;
            h = g.relu(h);
            if fx.layers.contains(&i) {
                out.push(h);
            }
        }
        Ok(out)
    }

    pub fn params(&self) -> Option<&ParamStore<T>> {
        match self {
            FeatureExtractor::Identity => None,
            FeatureExtractor::Conv(fx) => Some(&fx.params),
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        match self {
            FeatureExtractor::Identity => FeatureExtractor::Identity,
            FeatureExtractor::Conv(fx) => FeatureExtractor::Conv(ConvExtractor {
                stages: fx.stages.clone(),
                layers: fx.layers.clone(),
                params: fx.params.cast(),
            }),
        }
    }
}

fn stages(widths: &[usize]) -> Vec<Conv2d> {
    let mut cin = 3;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let c = Conv2d::new(format!("extractor.stage{i}"), cin, w, 3);
            cin = w;
            c
        })
        .collect()
}
