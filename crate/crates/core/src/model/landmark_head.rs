//! Landmark predictor: 1x1 conv branches over the shared feature, global
//! average pooling, PReLU on the widest branch, and the adaptive fusion of the
//! pooled image feature `FC(gamma * P(pool(f1)) + f_lmk)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::layers::{Conv2d, Linear};
use crate::model::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Real;
use crate::types::LANDMARK_VALUES;

#[derive(Debug, Clone)]
pub struct LandmarkHead {
    pub branches: Vec<Conv2d>,
    /// Projects the pooled image feature onto the landmark feature length.
    pub projection: Linear,
    pub fc: Linear,
    prelu_key: String,
    gamma_key: String,
}

pub struct LandmarkFeatures {
    /// Pooled branch vectors, in branch order.
    pub branches: Vec<Var>,
    /// Concatenated landmark feature.
    pub f_lmk: Var,
}

impl LandmarkHead {
    pub fn new(key: &str, share_channels: usize, image_feature_channels: usize, branch_widths: &[usize]) -> Self {
        let total: usize = branch_widths.iter().sum();
        LandmarkHead {
            branches: branch_widths
                .iter()
                .enumerate()
                .map(|(i, &w)| Conv2d::new(format!("{key}.branch{i}"), share_channels, w, 1))
                .collect(),
            projection: Linear::new(format!("{key}.projection"), image_feature_channels, total).no_bias(),
            fc: Linear::new(format!("{key}.fc"), total, LANDMARK_VALUES),
            prelu_key: format!("{key}.prelu.alpha"),
            gamma_key: format!("{key}.gamma"),
        }
    }

    pub fn gamma_key(&self) -> &str {
        &self.gamma_key
    }

    pub fn feature_len(&self) -> usize {
        self.branches.iter().map(|b| b.out_channels).sum()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v: Vec<ParamSpec> = self.branches.iter().flat_map(|b| b.specs()).collect();
        v.push(ParamSpec::new(&self.prelu_key, &[1], Init::Const(0.25)));
        v.extend(self.projection.specs());
        v.push(ParamSpec::new(&self.gamma_key, &[1], Init::Zeros));
        v.extend(self.fc.specs());
        v
    }

    /// Branch features and their concatenation `f_lmk`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_share: Var) -> Result<LandmarkFeatures> {
        let widest = self
            .branches
            .iter()
            .enumerate()
            .max_by_key(|(_, b)| b.out_channels)
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Config("landmark head needs at least one branch".into()))?;
        let alpha = g.param(&self.prelu_key, store.get(&self.prelu_key)?);
        let mut pooled = Vec::with_capacity(self.branches.len());
        for (i, branch) in self.branches.iter().enumerate() {
            let h = branch.forward(g, store, f_share)?;
            let mut v = g.global_avg_pool(h)?;
            if i == widest {
                v = g.prelu(v, alpha)?;
            }
            pooled.push(v);
        }
        let f_lmk = g.concat(&pooled)?;
        Ok(LandmarkFeatures { branches: pooled, f_lmk })
    }

    /// `FC(gamma * P(f1_pooled) + f_lmk)`, shape `[N, 136]`.
    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f1_pooled: Var, f_lmk: Var) -> Result<Var> {
        let fs = g.shape(f1_pooled).to_vec();
        let ls = g.shape(f_lmk).to_vec();
        if fs.len() != 2 || fs[1] != self.projection.in_features {
            return Err(Error::Config(format!(
                "pooled image feature {:?} does not match projection input {}",
                fs, self.projection.in_features
            )));
        }
        if ls.len() != 2 || ls[1] != self.projection.out_features || ls[0] != fs[0] {
            return Err(Error::Config(format!(
                "landmark feature {:?} does not match fused length {} (batch {})",
                ls, self.projection.out_features, fs[0]
            )));
        }
        let projected = self.projection.forward(g, store, f1_pooled)?;
        let gamma = g.param(&self.gamma_key, store.get(&self.gamma_key)?);
        let scaled = g.scale_by(projected, gamma)?;
        let fused = g.add(scaled, f_lmk)?;
        self.fc.forward(g, store, fused)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_share: Var, f1: Var) -> Result<Var> {
        let feats = self.features(g, store, f_share)?;
        let pooled = g.global_avg_pool(f1)?;
        self.fuse(g, store, pooled, feats.f_lmk)
    }
}
