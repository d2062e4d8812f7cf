//! Spectral-normalized patch discriminator: three stride-2 and two stride-1
//! 4x4 convolutions with LeakyReLU(0.2), emitting a map of raw scores.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::layers::Conv2d;
use crate::model::params::{Init, ParamSpec, ParamStore};
use crate::model::ModelConfig;
use crate::tensor::{ConvGeom, Real};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub layers: Vec<Conv2d>,
    image_size: usize,
}

fn u_key(layer: &Conv2d) -> String {
    format!("{}.sn_u", layer.key)
}

impl Discriminator {
    pub fn new(config: &ModelConfig) -> Self {
        let [a, b, c, d] = config.disc_channels;
        let plan = [(3, a, 2), (a, b, 2), (b, c, 2), (c, d, 1), (d, 1, 1)];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| Conv2d::new(format!("disc.conv{}", i + 1), cin, cout, 4).stride(stride).pad(1))
            .collect();
        Discriminator { layers, image_size: config.image_size }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        for layer in &self.layers {
            v.extend(layer.specs());
            v.push(ParamSpec::buffer(u_key(layer), &[layer.out_channels], Init::UnitVector));
        }
        v
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl rand::Rng) -> ParamStore<T> {
        ParamStore::init(&self.specs(), rng)
    }

    /// Spatial size of the score map for a square input of `size`.
    pub fn output_size(&self, size: usize) -> Option<usize> {
        self.layers.iter().try_fold(size, |s, l| ConvGeom::out_size(s, l.kernel, l.opts.stride, l.opts.pad, 1))
    }

    /// Score map `[N, 1, P, P]` for images `[N, 3, S, S]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::Shape(format!(
                "discriminator expects [N, 3, {0}, {0}], got {s:?}",
                self.image_size
            )));
        }
        let mut h = images;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w_param = store.get(&layer.weight_key())?;
            let u = store.get(&u_key(layer))?.data().to_vec();
            let v = right_vector(w_param.data(), &u);
            let w = g.param(&layer.weight_key(), w_param);
            let w = g.spectral_norm(w, &u, &v)?;
            let b = g.param(&layer.bias_key(), store.get(&layer.bias_key())?);
            h = layer.apply(g, h, w, Some(b))?;
            if i != last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    /// One power-iteration step on every layer's left singular vector estimate.
    pub fn power_iterate<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for layer in &self.layers {
            let w = store.get(&layer.weight_key())?.clone();
            let key = u_key(layer);
            let u = store.get(&key)?.data().to_vec();
            let v = right_vector(w.data(), &u);
            let rows = u.len();
            let cols = v.len();
            let mut next: Vec<T> = (0..rows)
                .map(|r| w.data()[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum())
                .collect();
            normalize(&mut next);
            if let Some(t) = store.get_mut(&key) {
                t.data_mut().copy_from_slice(&next);
            }
        }
        Ok(())
    }
}

/// `normalize(W^T u)` for a row-major `[rows, cols]` weight.
fn right_vector<T: Real>(w: &[T], u: &[T]) -> Vec<T> {
    let rows = u.len();
    let cols = w.len() / rows;
    let mut v = vec![T::zero(); cols];
    for (r, &ur) in u.iter().enumerate() {
        for (vv, &wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *vv += ur * wv;
        }
    }
    normalize(&mut v);
    v
}

fn normalize<T: Real>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::c(1e-12));
    v.iter_mut().for_each(|x| *x = *x / n);
}
