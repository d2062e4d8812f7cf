use std::collections::BTreeMap;

use crate::model::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are kept per parameter key.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Default for Adam {
    /// `beta = (0, 0.9)`, the usual choice for GAN inpainting backbones.
    fn default() -> Self {
        Adam::new(0.0, 0.9, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every key in `keys` that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, keys: &[String], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        for key in keys {
            let Some(g) = grads.get(key) else { continue };
            let Some(p) = params.get_mut(key) else { continue };
            let m = self.m.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
