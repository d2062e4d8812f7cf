use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Random unit vector (spectral-norm state).
    UnitVector,
}

/// Declared parameter: hierarchical key, shape, initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Buffers (spectral-norm vectors) are stored but never optimized.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(key: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { key: key.into(), shape: shape.to_vec(), init, trainable: true }
    }

    pub fn buffer(key: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { key: key.into(), shape: shape.to_vec(), init, trainable: false }
    }
}

/// Named parameter arrays of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Const(v) => vec![T::c(v); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| T::c(dist.sample(rng))).collect()
                }
                Init::UnitVector => {
                    let dist = Normal::new(0.0, 1.0).unwrap();
                    let v: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|x| T::c(x / norm)).collect()
                }
            };
            tensors.insert(spec.key.clone(), Arc::new(Tensor::from_vec(&spec.shape, data).expect("spec shape")));
        }
        ParamStore { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { tensors: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect() }
    }

    pub fn get(&self, key: &str) -> Result<&Arc<Tensor<T>>> {
        self.tensors.get(key).ok_or_else(|| Error::Config(format!("missing parameter {key}")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.tensors.contains_key(key)
    }

    pub fn set(&mut self, key: &str, value: Tensor<T>) {
        self.tensors.insert(key.to_string(), Arc::new(value));
    }

    /// Mutable access; copies the array if a graph still shares it.
    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(key).map(Arc::make_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor<T>>)> {
        self.tensors.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect() }
    }

    /// Checks keys and shapes against `specs`, reporting the first offending
    /// entry in declaration order.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.tensors.get(&spec.key) {
                None => return Err(Error::Checkpoint(format!("missing parameter {}", spec.key))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch at {}: expected {:?}, found {:?}",
                        spec.key,
                        spec.shape,
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        let declared: std::collections::HashSet<&str> = specs.iter().map(|s| s.key.as_str()).collect();
        let extra: Vec<&String> = self.tensors.keys().filter(|k| !declared.contains(k.as_str())).collect();
        if !extra.is_empty() {
            return Err(Error::Checkpoint(format!("unexpected parameters: {extra:?}")));
        }
        Ok(())
    }

    /// Bitwise equality of every array.
    pub fn bit_identical(&self, other: &ParamStore<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, v)| {
                other.tensors.get(k).is_some_and(|o| {
                    o.shape() == v.shape()
                        && o.data().iter().zip(v.data()).all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
                })
            })
    }
}
