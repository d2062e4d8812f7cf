//! Random-sampling hyperparameter search over landmark weight, learning
//! rate, decay and batch size.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Trainer, TrainingConfig, ValidationMetrics};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::Term;

/// One search dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum Dim {
    Fixed(f64),
    Uniform(f64, f64),
    LogUniform(f64, f64),
    Choice(Vec<f64>),
}

impl Dim {
    /// `fixed V`, `uniform LO HI`, `loguniform LO HI` or `choice A,B,...`.
    /// A bare number means `fixed`.
    pub fn parse(s: &str) -> Result<Self> {
        let err = || Error::Config(format!("bad search dimension {s:?}"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| err());
        let mut parts = s.split_whitespace();
        let head = parts.next().ok_or_else(err)?;
        let rest: Vec<&str> = parts.collect();
        let dim = match head {
            "fixed" if rest.len() == 1 => Dim::Fixed(num(rest[0])?),
            "uniform" if rest.len() == 2 => Dim::Uniform(num(rest[0])?, num(rest[1])?),
            "loguniform" if rest.len() == 2 => Dim::LogUniform(num(rest[0])?, num(rest[1])?),
            "choice" if !rest.is_empty() => {
                Dim::Choice(rest.join("").split(',').filter(|t| !t.is_empty()).map(num).collect::<Result<_>>()?)
            }
            _ if rest.is_empty() => Dim::Fixed(num(head)?),
            _ => return Err(err()),
        };
        match &dim {
            Dim::Uniform(a, b) if !(a <= b) => Err(err()),
            Dim::LogUniform(a, b) if !(*a > 0.0 && a <= b) => Err(err()),
            Dim::Choice(v) if v.is_empty() => Err(err()),
            _ => Ok(dim),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Dim::Fixed(v) => *v,
            Dim::Uniform(a, b) => {
                if a == b {
                    *a
                } else {
                    rng.gen_range(*a..*b)
                }
            }
            Dim::LogUniform(a, b) => {
                if a == b {
                    *a
                } else {
                    rng.gen_range(a.ln()..b.ln()).exp()
                }
            }
            Dim::Choice(v) => v[rng.gen_range(0..v.len())],
        }
    }

    /// Finite support, if any.
    fn points(&self) -> Option<Vec<f64>> {
        match self {
            Dim::Fixed(v) => Some(vec![*v]),
            Dim::Choice(v) => Some(v.clone()),
            _ => None,
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Fixed(v) => write!(f, "fixed {v}"),
            Dim::Uniform(a, b) => write!(f, "uniform {a} {b}"),
            Dim::LogUniform(a, b) => write!(f, "loguniform {a} {b}"),
            Dim::Choice(v) => write!(f, "choice {}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub landmark_weight: Dim,
    pub lr: Dim,
    pub lr_decay: Dim,
    pub batch_size: Dim,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            landmark_weight: Dim::LogUniform(0.01, 1.0),
            lr: Dim::LogUniform(1e-5, 1e-3),
            lr_decay: Dim::Uniform(0.5, 1.0),
            batch_size: Dim::Choice(vec![2.0, 4.0, 8.0]),
        }
    }
}

impl SearchSpace {
    /// Every point of the space when all dimensions are finite.
    fn grid(&self) -> Option<Vec<[f64; 4]>> {
        let dims = [self.landmark_weight.points()?, self.lr.points()?, self.lr_decay.points()?, self.batch_size.points()?];
        let mut out = vec![[0.0; 4]];
        for (d, pts) in dims.iter().enumerate() {
            out = out.iter().flat_map(|p| pts.iter().map(move |&v| {
                let mut q = *p;
                q[d] = v;
                q
            })).collect();
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    pub landmark_weight: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub iterations: u64,
    /// Validation pixel loss plus landmark error; `inf` for diverged trials.
    pub score: f64,
    pub metrics: Option<ValidationMetrics>,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: TrainingConfig,
    pub best_trial: usize,
    pub trials: Vec<Trial>,
}

/// Seed of trial `index`; depends only on the master seed and the index,
/// so trials can run in any order.
pub fn trial_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

/// Config that trial `index` trains with.
pub fn trial_config(base: &TrainingConfig, point: [f64; 4], index: usize, iterations: u64) -> TrainingConfig {
    let mut c = base.clone();
    c.weights.set(Term::Landmark, point[0]);
    c.lr = point[1];
    c.lr_decay = point[2];
    c.batch_size = point[3].round().max(1.0) as usize;
    c.seed = trial_seed(base.seed, index);
    c.max_iterations = iterations;
    c
}

/// Trains one short run per trial and returns the configuration with the
/// lowest validation score (ties go to the earlier trial). When the space
/// is finite and has at most `n_trials` points, every point is tried once
/// instead of sampling. `trial_iterations` defaults to one epoch of `data`.
pub fn hyperparameter_search(
    base: &TrainingConfig,
    space: &SearchSpace,
    n_trials: usize,
    trial_iterations: Option<u64>,
    data: &Dataset,
    val: &Dataset,
) -> Result<SearchResult> {
    if n_trials == 0 {
        return Err(Error::Config("search needs at least one trial".into()));
    }
    let points: Vec<[f64; 4]> = match space.grid() {
        Some(grid) if grid.len() <= n_trials => grid,
        _ => (0..n_trials)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
                rng.set_stream(u64::MAX - i as u64);
                [space.landmark_weight.sample(&mut rng), space.lr.sample(&mut rng), space.lr_decay.sample(&mut rng), space.batch_size.sample(&mut rng)]
            })
            .collect(),
    };
    let mut trials = Vec::with_capacity(points.len());
    for (index, point) in points.into_iter().enumerate() {
        let batch = point[3].round().max(1.0) as u64;
        let iterations = trial_iterations.unwrap_or((data.len() as u64 / batch).max(1));
        let config = trial_config(base, point, index, iterations);
        let outcome = Trainer::new(config.clone()).and_then(|t| {
            let mut state = t.init_state();
            let batches = crate::data::Batches::for_dataset(data, t.config.batch_size, t.config.seed)?;
            while state.t < iterations {
                let idx = batches.at(state.t);
                t.train_step(&mut state, data, &idx)?;
            }
            t.validate(&state.generator, val)
        });
        let (score, metrics) = match outcome {
            Ok(m) if m.score().is_finite() => (m.score(), Some(m)),
            Ok(m) => (f64::INFINITY, Some(m)),
            Err(Error::NonFinite { term, iteration }) => {
                log::warn!("trial {index} diverged ({term} at iteration {iteration})");
                (f64::INFINITY, None)
            }
            Err(e) => return Err(e),
        };
        log::info!("trial {index}: score {score}");
        trials.push(Trial {
            index,
            seed: config.seed,
            landmark_weight: point[0],
            lr: config.lr,
            lr_decay: config.lr_decay,
            batch_size: config.batch_size,
            iterations,
            score,
            metrics,
        });
    }
    let best = trials.iter().fold(&trials[0], |b, t| if t.score < b.score { t } else { b });
    let mut best_config = trial_config(base, [best.landmark_weight, best.lr, best.lr_decay, best.batch_size as f64], best.index, base.max_iterations);
    best_config.seed = base.seed;
    Ok(SearchResult { best: best_config, best_trial: best.index, trials })
}
