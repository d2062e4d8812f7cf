//! Building blocks shared by the generator, the discriminator and the
//! feature extractor. Each layer owns its parameter keys and declares them
//! through `specs()`.

use crate::error::Result;
use crate::graph::{Conv2dOpts, Graph, Var};
use crate::model::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Real;

/// Standard deviation of the normal initializer for conv and linear weights.
pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub key: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub opts: Conv2dOpts,
    pub bias: bool,
    /// Weight is `[in, out, k, k]` and the layer upsamples by `opts.stride`.
    pub transposed: bool,
}

impl Conv2d {
    pub fn new(key: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            key: key.into(),
            in_channels,
            out_channels,
            kernel,
            opts: Conv2dOpts { stride: 1, pad: kernel / 2, dilation: 1 },
            bias: true,
            transposed: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.opts.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize) -> Self {
        self.opts.pad = pad;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.opts.dilation = dilation;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.key)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.key)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        if self.transposed {
            [self.in_channels, self.out_channels, self.kernel, self.kernel]
        } else {
            [self.out_channels, self.in_channels, self.kernel, self.kernel]
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::new(self.weight_key(), &self.weight_shape(), Init::Normal(INIT_STD))];
        if self.bias {
            v.push(ParamSpec::new(self.bias_key(), &[self.out_channels], Init::Zeros));
        }
        v
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_key(), store.get(&self.weight_key())?);
        let b = if self.bias { Some(g.param(&self.bias_key(), store.get(&self.bias_key())?)) } else { None };
        self.apply(g, x, w, b)
    }

    /// Applies the layer with explicit weight/bias nodes (used by spectral norm).
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        if self.transposed {
            g.conv_transpose2d(x, w, b, self.opts.stride, self.opts.pad)
        } else {
            g.conv2d(x, w, b, self.opts)
        }
    }
}

/// Gated convolution block: `IN(ReLU(feature(x))) * sigmoid(gate(x))`.
#[derive(Debug, Clone)]
pub struct GatedConv {
    pub feature: Conv2d,
    pub gate: Conv2d,
}

pub struct GatedOutput {
    pub output: Var,
    /// Feature and gate pre-activations, concatenated on the channel axis.
    pub both: Var,
}

impl GatedConv {
    /// Both branches share the geometry of `template`; keys get `.feature` / `.gate`.
    pub fn new(template: Conv2d) -> Self {
        let mut feature = template.clone();
        feature.key = format!("{}.feature", template.key);
        let mut gate = template.clone();
        gate.key = format!("{}.gate", template.key);
        GatedConv { feature, gate }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = self.feature.specs();
        v.extend(self.gate.specs());
        v
    }

    pub fn out_channels(&self) -> usize {
        self.feature.out_channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(g, store, x)?.output)
    }

    pub fn forward_parts<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<GatedOutput> {
        // both branches run as one convolution so the input is unfolded once
        let param = |g: &mut Graph<T>, key: String| -> Result<Var> { Ok(g.param(&key, store.get(&key)?)) };
        let wf = param(g, self.feature.weight_key())?;
        let wg = param(g, self.gate.weight_key())?;
        let w = g.concat_axis(&[wf, wg], if self.feature.transposed { 1 } else { 0 })?;
        let b = if self.feature.bias {
            let bf = param(g, self.feature.bias_key())?;
            let bg = param(g, self.gate.bias_key())?;
            Some(g.concat_axis(&[bf, bg], 0)?)
        } else {
            None
        };
        let both = self.feature.apply(g, x, w, b)?;
        let output = g.gated(both, NORM_EPS)?;
        Ok(GatedOutput { output, both })
    }

    /// Gate activations `sigmoid(gate(x))` from the pre-activation pair.
    pub fn gate_values<T: Real>(&self, g: &mut Graph<T>, parts: &GatedOutput) -> Result<Var> {
        let out = self.feature.out_channels;
        let gate = g.narrow(parts.both, 1, out, out)?;
        Ok(g.sigmoid(gate))

    }
}

/// `x + IN(conv(ReLU(IN(dilated_conv(x)))))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub dilated: Conv2d,
    pub conv: Conv2d,
}

impl ResidualBlock {
    pub fn new(key: &str, channels: usize, dilation: usize) -> Self {
        ResidualBlock {
            dilated: Conv2d::new(format!("{key}.dilated"), channels, channels, 3).pad(dilation).dilation(dilation),
            conv: Conv2d::new(format!("{key}.conv"), channels, channels, 3),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = self.dilated.specs();
        v.extend(self.conv.specs());
        v
    }

    /// Response of the dilated convolution alone.
    pub fn dilated_response<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.dilated.forward(g, store, x)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.dilated.forward(g, store, x)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        let h = g.relu(h);
        let h = self.conv.forward(g, store, h)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub key: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
    pub init_std: f64,
}

impl Linear {
    pub fn new(key: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear {
            key: key.into(),
            in_features,
            out_features,
            bias: true,
            init_std: 1.0 / (in_features as f64).sqrt(),
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.key)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.key)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::new(self.weight_key(), &[self.out_features, self.in_features], Init::Normal(self.init_std))];
        if self.bias {
            v.push(ParamSpec::new(self.bias_key(), &[self.out_features], Init::Zeros));
        }
        v
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_key(), store.get(&self.weight_key())?);
        let b = if self.bias { Some(g.param(&self.bias_key(), store.get(&self.bias_key())?)) } else { None };
        g.linear(x, w, b)
    }
}
