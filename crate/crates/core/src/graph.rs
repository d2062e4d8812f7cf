//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter the
//! tape by key through [`Graph::param`]; the same key always maps to the same
//! node, so a network evaluated several times in one pass accumulates its
//! gradient correctly. Constants enter through [`Graph::input`] and never
//! receive gradients, which is also how outputs are detached.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{col2im_rows, conv_direct, im2col_rows, matmul, matmul_strided, row_tiles, ConvGeom, Mat, Real, Tensor};

/// Convolutions with at most this many outputs skip the unfold-and-GEMM path.
const DIRECT_CONV_MAX_OUT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts { stride: 1, pad: 0, dilation: 1 }
    }
}

struct AttentionSample<T> {
    holes: Vec<usize>,
    known: Vec<usize>,
    /// Softmax weights, `holes x known`.
    weights: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts },
    ConvT { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy { x: Var, s: Var },
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Prelu { x: Var, alpha: Var },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Gated { x: Var, saved: Option<GatedSaved<T>> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GlobalAvgPool(Var),
    AvgPool2(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Select { mask: Arc<Vec<bool>>, a: Var, b: Var },
    ChannelAffine { x: Var, scale: Vec<T> },
    Attention { x: Var, samples: Vec<AttentionSample<T>>, temperature: f64, eps: f64 },
    SpectralNorm { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
    Mean(Var),
    L1 { a: Var, b: Var, weight: Option<Arc<Tensor<T>>> },
    Mse(Var, Var),
    Tv(Var),
    Gram(Var),
}

/// Forward intermediates of [`Graph::gated`], kept only when a gradient is needed.
struct GatedSaved<T> {
    normed: Vec<T>,
    gate: Vec<T>,
    inv_std: Vec<T>,
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    warnings: Vec<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(Error::Shape(msg))
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), warnings: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-fatal conditions raised while building the graph.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Shared constant leaf (frozen weights); no copy is made.
    pub fn constant(&mut self, t: &Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node { value: Arc::clone(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient without being a named parameter.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v`'s value as a constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Named parameter leaf. Repeated calls with the same key share a node.
    pub fn param(&mut self, key: &str, value: &Arc<Tensor<T>>) -> Var {
        if let Some(&v) = self.params.get(key) {
            return v;
        }
        self.nodes.push(Node { value: Arc::clone(value), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key.to_string(), v);
        v
    }

    /// Parameters registered in this graph, keyed by name.
    pub fn param_vars(&self) -> &HashMap<String, Var> {
        &self.params
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return shape_err(format!("conv2d expects NCHW input and OCkk weight, got {xs:?} / {ws:?}"));
        }
        if xs[1] != ws[1] {
            return shape_err(format!("conv2d input has {} channels, weight expects {}", xs[1], ws[1]));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err(format!("conv2d bias {:?} vs {} outputs", self.shape(b), ws[0]));
            }
        }
        let geom = ConvGeom {
            in_h: xs[2],
            in_w: xs[3],
            kernel: ws[2],
            stride: opts.stride,
            pad: opts.pad,
            dilation: opts.dilation,
        };
        if !geom.valid() {
            return shape_err(format!("conv2d kernel {} does not fit input {}x{}", ws[2], xs[2], xs[3]));
        }
        let (n, c, o) = (xs[0], xs[1], ws[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let ckk = c * geom.kernel * geom.kernel;
        let plane = oh * ow;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let tiles = row_tiles(oh, ow, ckk);
        let mut cols = Vec::new();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            let chw = c * geom.in_h * geom.in_w;
            // bias is written first and the products accumulate onto it
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (i, chunk) in od.chunks_mut(plane).enumerate() {
                    chunk.fill(bv[i % o]);
                }
            }
            for s in 0..n {
                let dst = &mut od[s * o * plane..(s + 1) * o * plane];
                if o <= DIRECT_CONV_MAX_OUT && geom.stride == 1 {
                    conv_direct(&xv[s * chw..(s + 1) * chw], c, &geom, wv, o, dst);
                    continue;
                }
                for &(r0, r1) in &tiles {
                    let tn = (r1 - r0) * ow;
                    cols.resize(ckk * tn, T::zero());
                    im2col_rows(&xv[s * chw..(s + 1) * chw], c, &geom, r0, r1, &mut cols);
                    matmul_strided(Mat::new(wv, o, ckk), Mat::new(&cols, ckk, tn), &mut dst[r0 * ow..], plane, T::one(), T::one());
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, opts }, rg))
    }

    /// Transposed convolution; `w` is `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return shape_err(format!("conv_transpose2d shapes {xs:?} / {ws:?}"));
        }
        if xs[1] != ws[0] {
            return shape_err(format!("conv_transpose2d input has {} channels, weight expects {}", xs[1], ws[0]));
        }
        let k = ws[2];
        let big = |s: usize| (s - 1) * stride + k;
        let (oh, ow) = (big(xs[2]).checked_sub(2 * pad), big(xs[3]).checked_sub(2 * pad));
        let (oh, ow) = match (oh, ow) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return shape_err(format!("conv_transpose2d padding {pad} too large")),
        };
        let geom = ConvGeom { in_h: oh, in_w: ow, kernel: k, stride, pad, dilation: 1 };
        debug_assert_eq!((geom.out_h(), geom.out_w()), (xs[2], xs[3]));
        let (n, c, o) = (xs[0], xs[1], ws[1]);
        let okk = o * k * k;
        let hw = xs[2] * xs[3];
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let (sh, sw) = (xs[2], xs[3]);
        let tiles = row_tiles(sh, sw, okk);
        let mut cols = Vec::new();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (i, chunk) in od.chunks_mut(oh * ow).enumerate() {
                    chunk.fill(bv[i % o]);
                }
            }
            for s in 0..n {
                let xn = &xv[s * c * hw..(s + 1) * c * hw];
                for &(r0, r1) in &tiles {
                    let tn = (r1 - r0) * sw;
                    cols.resize(okk * tn, T::zero());
                    matmul(Mat::t(wv, c, okk), Mat::new(&xn[r0 * sw..], c, tn).with_ld(hw), &mut cols, T::one(), T::zero());
                    col2im_rows(&cols, o, &geom, r0, r1, &mut od[s * o * oh * ow..(s + 1) * o * oh * ow]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvT { x, w, b, stride, pad }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err(format!("scale_by expects a scalar, got {:?}", self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| sv * v);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy { x, s }, rg))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::c(scale), T::c(shift));
        let out = self.value(x).map(|v| v * a + b);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut out = Tensor::zeros(src.shape());
        T::sigmoid_slice(src.data(), out.data_mut());
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::c(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// PReLU with a single learnable slope.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.value(alpha).len() != 1 {
            return shape_err("prelu expects a scalar slope".into());
        }
        let a = self.value(alpha).item();
        let out = self.value(x).map(|v| if v > T::zero() { v } else { a * v });
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(out, Op::Prelu { x, alpha }, rg))
    }

    /// Per-sample, per-channel normalisation over spatial positions (no affine).
    /// Gated activation over a `[N, 2C, H, W]` input whose first `C` channels
    /// are features and last `C` are gates: `IN(ReLU(f)) * sigmoid(g)`.
    pub fn gated(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] % 2 != 0 {
            return shape_err(format!("gated expects [N, 2C, H, W], got {xs:?}"));
        }
        let (n, c, plane) = (xs[0], xs[1] / 2, xs[2] * xs[3]);
        let rg = self.rg(x);
        let np = T::from_usize(plane).unwrap();
        let mut out = Tensor::zeros(&[n, c, xs[2], xs[3]]);
        let mut normed = vec![T::zero(); if rg { n * c * plane } else { plane }];
        let mut gate = vec![T::zero(); if rg { n * c * plane } else { plane }];
        let mut inv_std = Vec::with_capacity(n * c);
        let src = self.value(x).data();
        let od = out.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let k = s * c + ch;
                let f = &src[(s * 2 * c + ch) * plane..][..plane];
                let gt = &src[(s * 2 * c + c + ch) * plane..][..plane];
                let range = if rg { k * plane..(k + 1) * plane } else { 0..plane };
                let nf = &mut normed[range.clone()];
                let sg = &mut gate[range];
                for (d, &v) in nf.iter_mut().zip(f) {
                    *d = v.max(T::zero());
                }
                let mean = nf.iter().copied().sum::<T>() / np;
                let var = nf.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / np;
                let istd = T::one() / (var + T::c(eps)).sqrt();
                inv_std.push(istd);
                T::sigmoid_slice(gt, sg);
                for ((o, v), &sv) in od[k * plane..(k + 1) * plane].iter_mut().zip(nf.iter_mut()).zip(sg.iter()) {
                    *v = (*v - mean) * istd;
                    *o = *v * sv;
                }
            }
        }
        let saved = rg.then_some(GatedSaved { normed, gate, inv_std });
        Ok(self.push(out, Op::Gated { x, saved }, rg))
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("instance_norm expects NCHW, got {xs:?}"));
        }
        let plane = xs[2] * xs[3];
        let mut out = Tensor::zeros(&xs);
        let mut inv_std = Vec::with_capacity(xs[0] * xs[1]);
        let np = T::from_usize(plane).unwrap();
        for (src, dst) in self.value(x).data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            let mean = src.iter().copied().sum::<T>() / np;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / np;
            let istd = T::one() / (var + T::c(eps)).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * istd;
            }
            inv_std.push(istd);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::InstanceNorm { x, inv_std }, rg))
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat_axis(parts, 1)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat_axis(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return shape_err(format!("concat: {:?} incompatible with {:?}", s, first));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let c = self.shape(p)[axis];
                data.extend_from_slice(&self.value(p).data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return shape_err(format!("narrow {start}..{} on axis {axis} of {xs:?}", start + len));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.value(x).data();
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("global_avg_pool expects NCHW, got {xs:?}"));
        }
        let plane = xs[2] * xs[3];
        let np = T::from_usize(plane).unwrap();
        let data: Vec<T> = self.value(x).data().chunks(plane).map(|c| c.iter().copied().sum::<T>() / np).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[xs[0], xs[1]], data)?, Op::GlobalAvgPool(x), rg))
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return shape_err(format!("avg_pool2 needs NCHW with H,W >= 2, got {xs:?}"));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let q = T::c(0.25);
        let mut out = Tensor::zeros(&[xs[0], xs[1], oh, ow]);
        for (src, dst) in self.value(x).data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, o]);
        matmul(Mat::new(self.value(x).data(), n, i), Mat::t(self.value(w).data(), o, i), out.data_mut(), T::one(), T::zero());
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err(format!("linear bias {:?} vs {o} outputs", self.shape(b)));
            }
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(o) {
                row.iter_mut().zip(&bv).for_each(|(r, &bb)| *r += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Element-wise `mask ? a : b`.
    pub fn select(&mut self, mask: Arc<Vec<bool>>, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "select")?;
        if mask.len() != self.value(a).len() {
            return shape_err(format!("select mask has {} entries for {} values", mask.len(), self.value(a).len()));
        }
        let data = mask
            .iter()
            .zip(self.value(a).data().iter().zip(self.value(b).data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Select { mask, a, b }, rg))
    }

    /// `x[:, c] * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[1] != scale.len() || xs[1] != shift.len() {
            return shape_err(format!("channel_affine: {xs:?} vs {} coefficients", scale.len()));
        }
        let inner: usize = xs[2..].iter().product();
        let sc: Vec<T> = scale.iter().map(|&v| T::c(v)).collect();
        let sh: Vec<T> = shift.iter().map(|&v| T::c(v)).collect();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let c = i % xs[1];
            chunk.iter_mut().for_each(|v| *v = *v * sc[c] + sh[c]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelAffine { x, scale: sc }, rg))
    }

    /// Fill hole positions from known positions.
    ///
    /// For each sample, every position with `hole[p]` set receives, as a
    /// residual, the softmax(cosine / temperature)-weighted sum of the feature
    /// vectors at known positions. Known positions pass through unchanged. A
    /// sample without any known position is passed through and a warning is
    /// recorded.
    pub fn attention(&mut self, x: Var, hole: &[bool], temperature: f64, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("attention expects NCHW, got {xs:?}"));
        }
        let (n, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
        if hole.len() != n * p {
            return shape_err(format!("attention mask has {} entries, features need {}", hole.len(), n * p));
        }
        let mut out = self.value(x).clone();
        let mut samples = Vec::with_capacity(n);
        let inv_t = T::c(1.0 / temperature);
        for s in 0..n {
            let mask = &hole[s * p..(s + 1) * p];
            let holes: Vec<usize> = (0..p).filter(|&i| mask[i]).collect();
            let known: Vec<usize> = (0..p).filter(|&i| !mask[i]).collect();
            if holes.is_empty() || known.is_empty() {
                if known.is_empty() && !holes.is_empty() {
                    self.warn(Error::DegenerateAttention { sample: s }.to_string() + "; attention skipped");
                }
                samples.push(AttentionSample { holes: Vec::new(), known: Vec::new(), weights: Vec::new() });
                continue;
            }
            let xv = &self.value(x).data()[s * c * p..(s + 1) * c * p];
            let fh = gather_cols(xv, c, p, &holes);
            let fk = gather_cols(xv, c, p, &known);
            let nh = normalize_cols(&fh, c, holes.len(), eps);
            let nk = normalize_cols(&fk, c, known.len(), eps);
            let (h, k) = (holes.len(), known.len());
            let mut w = vec![T::zero(); h * k];
            matmul(Mat::t(&nh, c, h), Mat::new(&nk, c, k), &mut w, inv_t, T::zero());
            for row in w.chunks_mut(k) {
                softmax_in_place(row);
            }
            // attended = Fk * W^T  -> [c, h]
            let mut att = vec![T::zero(); c * h];
            matmul(Mat::new(&fk, c, k), Mat::t(&w, h, k), &mut att, T::one(), T::zero());
            let od = &mut out.data_mut()[s * c * p..(s + 1) * c * p];
            for ch in 0..c {
                for (j, &pos) in holes.iter().enumerate() {
                    od[ch * p + pos] += att[ch * h + j];
                }
            }
            samples.push(AttentionSample { holes, known, weights: w });
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Attention { x, samples, temperature, eps }, rg))
    }

    /// `w / sigma` where `sigma = u^T W v` for fixed power-iteration vectors.
    pub fn spectral_norm(&mut self, w: Var, u: &[T], v: &[T]) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let rows = ws[0];
        let cols: usize = ws[1..].iter().product();
        if u.len() != rows || v.len() != cols {
            return shape_err(format!("spectral_norm vectors {}x{} for weight {ws:?}", u.len(), v.len()));
        }
        let wv = self.value(w).data();
        let mut sigma = T::zero();
        for r in 0..rows {
            let row = &wv[r * cols..(r + 1) * cols];
            sigma += u[r] * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
        }
        let sigma = sigma.max(T::c(1e-12));
        let out = self.value(w).map(|x| x / sigma);
        let rg = self.rg(w);
        Ok(self.push(out, Op::SpectralNorm { w, u: u.to_vec(), v: v.to_vec(), sigma }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean absolute difference, optionally weighted per element.
    pub fn l1(&mut self, a: Var, b: Var, weight: Option<Arc<Tensor<T>>>) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let total: T = match &weight {
            Some(w) => {
                if w.shape() != self.shape(a) {
                    return shape_err("l1 weight shape mismatch".into());
                }
                av.iter().zip(bv).zip(w.data()).map(|((&x, &y), &ww)| ww * (x - y).abs()).sum()
            }
            None => av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum(),
        };
        let out = Tensor::scalar(total / T::from_usize(av.len()).unwrap());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::L1 { a, b, weight }, rg))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let total: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(total / T::from_usize(av.len()).unwrap());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Anisotropic L1 total variation, averaged over all neighbour pairs.
    pub fn tv(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("tv expects NCHW, got {xs:?}"));
        }
        let (h, w) = (xs[2], xs[3]);
        let pairs = xs[0] * xs[1] * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
        let mut total = T::zero();
        for plane in self.value(x).data().chunks(h * w) {
            for y in 0..h {
                for xx in 0..w {
                    let v = plane[y * w + xx];
                    if xx + 1 < w {
                        total += (plane[y * w + xx + 1] - v).abs();
                    }
                    if y + 1 < h {
                        total += (plane[(y + 1) * w + xx] - v).abs();
                    }
                }
            }
        }
        let value = if pairs == 0 { T::zero() } else { total / T::from_usize(pairs).unwrap() };
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Tv(x), rg))
    }

    /// Gram matrices `F F^T / (C * H * W)` per sample: `[N, C, H, W] -> [N, C, C]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("gram expects NCHW, got {xs:?}"));
        }
        let (n, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
        let norm = T::one() / T::from_usize(c * p).unwrap();
        let mut out = Tensor::zeros(&[n, c, c]);
        for s in 0..n {
            let f = &self.value(x).data()[s * c * p..(s + 1) * c * p];
            matmul(Mat::new(f, c, p), Mat::t(f, c, p), &mut out.data_mut()[s * c * c..(s + 1) * c * c], norm, T::zero());
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gram(x), rg))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return shape_err("weighted_sum expects scalar terms".into());
            }
            let scaled = self.affine(v, w, 0.0);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Shape("weighted_sum of no terms".into()))
    }

    /// Gradients of the scalar `loss` with respect to every node on its tape.
    /// Side of every kink the recorded computation touched: ReLU-family
    /// inputs, gated feature pre-activations and L1 / TV differences. Two
    /// evaluations with equal patterns lie on the same linear piece, which is
    /// what a finite-difference check needs.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        let pos = |v: &T| *v > T::zero();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Prelu { x, .. } => bits.extend(self.value(*x).data().iter().map(pos)),
                Op::Gated { x, .. } => {
                    let xs = self.shape(*x);
                    let (c, plane) = (xs[1] / 2, xs[2] * xs[3]);
                    for sample in self.value(*x).data().chunks(2 * c * plane) {
                        bits.extend(sample[..c * plane].iter().map(pos));
                    }
                }
                Op::L1 { a, b, .. } => {
                    bits.extend(self.value(*a).data().iter().zip(self.value(*b).data()).map(|(x, y)| x > y));
                }
                Op::Tv(x) => {
                    let xs = self.shape(*x);
                    let (h, w) = (xs[2], xs[3]);
                    for plane in self.value(*x).data().chunks(h * w) {
                        for y in 0..h {
                            for xx in 0..w {
                                if xx + 1 < w {
                                    bits.push(plane[y * w + xx + 1] > plane[y * w + xx]);
                                }
                                if y + 1 < h {
                                    bits.push(plane[(y + 1) * w + xx] > plane[y * w + xx]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        bits
    }

    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = self.value(loss);
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, opts } => self.back_conv(*x, *w, *b, *opts, g, grads),
            Op::ConvT { x, w, b, stride, pad } => self.back_conv_t(*x, *w, *b, *stride, *pad, out.shape(), g, grads),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).item();
                if self.rg(*x) {
                    self.acc(grads, *x, g.map(|v| v * sv));
                }
                if self.rg(*s) {
                    let d: T = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                    self.acc(grads, *s, Tensor::scalar(d));
                }
            }
            Op::Affine { x, scale } => {
                let a = T::c(*scale);
                self.acc(grads, *x, g.map(|v| v * a));
            }
            Op::Sigmoid(x) => self.acc(grads, *x, g.zip_map(out, |gv, y| gv * y * (T::one() - y))),
            Op::Relu(x) => self.acc(grads, *x, g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })),
            Op::LeakyRelu(x, slope) => {
                let s = T::c(*slope);
                self.acc(grads, *x, g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { gv * s }));
            }
            Op::Tanh(x) => self.acc(grads, *x, g.zip_map(out, |gv, y| gv * (T::one() - y * y))),
            Op::Prelu { x, alpha } => {
                let a = self.value(*alpha).item();
                let xv = self.value(*x);
                if self.rg(*x) {
                    self.acc(grads, *x, g.zip_map(xv, |gv, v| if v > T::zero() { gv } else { gv * a }));
                }
                if self.rg(*alpha) {
                    let d: T = g.data().iter().zip(xv.data()).filter(|(_, &v)| v <= T::zero()).map(|(&gv, &v)| gv * v).sum();
                    self.acc(grads, *alpha, Tensor::scalar(d));
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let s = out.shape();
                let plane = s[2] * s[3];
                let np = T::from_usize(plane).unwrap();
                let mut dx = Tensor::zeros(s);
                for (k, ((gy, y), d)) in g.data().chunks(plane).zip(out.data().chunks(plane)).zip(dx.data_mut().chunks_mut(plane)).enumerate() {
                    let mg = gy.iter().copied().sum::<T>() / np;
                    let mgy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / np;
                    for ((dv, &gv), &yv) in d.iter_mut().zip(gy).zip(y) {
                        *dv = inv_std[k] * (gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Gated { x, saved } => {
                let saved = saved.as_ref().expect("gated node with gradient keeps its intermediates");
                let xs = self.shape(*x).to_vec();
                let (n, c, plane) = (xs[0], xs[1] / 2, xs[2] * xs[3]);
                let np = T::from_usize(plane).unwrap();
                let src = self.value(*x).data();
                let mut dx = Tensor::zeros(&xs);
                let dd = dx.data_mut();
                let mut dn = vec![T::zero(); plane];
                for s in 0..n {
                    for ch in 0..c {
                        let k = s * c + ch;
                        let go = &g.data()[k * plane..(k + 1) * plane];
                        let nf = &saved.normed[k * plane..(k + 1) * plane];
                        let sg = &saved.gate[k * plane..(k + 1) * plane];
                        let gbase = (s * 2 * c + c + ch) * plane;
                        for i in 0..plane {
                            dn[i] = go[i] * sg[i];
                            dd[gbase + i] = go[i] * nf[i] * sg[i] * (T::one() - sg[i]);
                        }
                        let mg = dn.iter().copied().sum::<T>() / np;
                        let mgy = dn.iter().zip(nf).map(|(&a, &b)| a * b).sum::<T>() / np;
                        let fbase = (s * 2 * c + ch) * plane;
                        for i in 0..plane {
                            let active = src[fbase + i] > T::zero();
                            dd[fbase + i] = if active { saved.inv_std[k] * (dn[i] - mg - nf[i] * mgy) } else { T::zero() };
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let s = out.shape();
                let total = s[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let c = ps[*axis];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * c * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + c * inner]);
                        }
                        self.acc(grads, p, Tensor::from_vec(&ps, d).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = out.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut d = Tensor::zeros(&xs);
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    d.data_mut()[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let plane = s[2] * s[3];
                let np = T::from_usize(plane).unwrap();
                let mut dx = Tensor::zeros(&s);
                for (d, &gv) in dx.data_mut().chunks_mut(plane).zip(g.data()) {
                    d.fill(gv / np);
                }
                self.acc(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let q = T::c(0.25);
                let mut dx = Tensor::zeros(&s);
                for (d, gp) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = gp[y * ow + xx] * q;
                            let i = 2 * y * w + 2 * xx;
                            d[i] += v;
                            d[i + 1] += v;
                            d[i + w] += v;
                            d[i + w + 1] += v;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, inp, o) = (xs[0], xs[1], ws[0]);
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(&xs);
                    matmul(Mat::new(g.data(), n, o), Mat::new(self.value(*w).data(), o, inp), dx.data_mut(), T::one(), T::zero());
                    self.acc(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(&ws);
                    matmul(Mat::t(g.data(), n, o), Mat::new(self.value(*x).data(), n, inp), dw.data_mut(), T::one(), T::zero());
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(&[o]);
                        for row in g.data().chunks(o) {
                            db.data_mut().iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::Select { mask, a, b } => {
                if self.rg(*a) {
                    let d = g.data().iter().zip(mask.iter()).map(|(&gv, &m)| if m { gv } else { T::zero() }).collect();
                    self.acc(grads, *a, Tensor::from_vec(g.shape(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(mask.iter()).map(|(&gv, &m)| if m { T::zero() } else { gv }).collect();
                    self.acc(grads, *b, Tensor::from_vec(g.shape(), d).unwrap());
                }
            }
            Op::ChannelAffine { x, scale } => {
                let s = out.shape();
                let inner: usize = s[2..].iter().product();
                let mut dx = g.clone();
                for (k, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                    let sc = scale[k % s[1]];
                    chunk.iter_mut().for_each(|v| *v *= sc);
                }
                self.acc(grads, *x, dx);
            }
            Op::Attention { x, samples, temperature, eps } => {
                self.back_attention(*x, samples, *temperature, *eps, g, grads)
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let cols = v.len();
                let inner: T = g.data().iter().zip(out.data()).map(|(&a, &b)| a * b).sum();
                let mut dw = g.clone();
                for (r, row) in dw.data_mut().chunks_mut(cols).enumerate() {
                    for (cidx, d) in row.iter_mut().enumerate() {
                        *d = (*d - inner * u[r] * v[cidx]) / *sigma;
                    }
                }
                self.acc(grads, *w, dw);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let d = g.item() / T::from_usize(xv.len()).unwrap();
                self.acc(grads, *x, Tensor::full(xv.shape(), d));
            }
            Op::L1 { a, b, weight } => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                let scale = g.item() / n;
                let mut d = self.value(*a).zip_map(self.value(*b), |x, y| sign(x - y) * scale);
                if let Some(w) = weight {
                    d = d.zip_map(w, |dv, wv| dv * wv);
                }
                if self.rg(*b) {
                    self.acc(grads, *b, d.map(|v| -v));
                }
                self.acc(grads, *a, d);
            }
            Op::Mse(a, b) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                let scale = T::c(2.0) * g.item() / n;
                let d = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * scale);
                if self.rg(*b) {
                    self.acc(grads, *b, d.map(|v| -v));
                }
                self.acc(grads, *a, d);
            }
            Op::Tv(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let pairs = s[0] * s[1] * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
                if pairs == 0 {
                    return;
                }
                let scale = g.item() / T::from_usize(pairs).unwrap();
                let mut dx = Tensor::zeros(&s);
                for (plane, d) in self.value(*x).data().chunks(h * w).zip(dx.data_mut().chunks_mut(h * w)) {
                    for y in 0..h {
                        for xx in 0..w {
                            let i = y * w + xx;
                            if xx + 1 < w {
                                let sg = sign(plane[i + 1] - plane[i]) * scale;
                                d[i + 1] += sg;
                                d[i] -= sg;
                            }
                            if y + 1 < h {
                                let sg = sign(plane[i + w] - plane[i]) * scale;
                                d[i + w] += sg;
                                d[i] -= sg;
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Gram(x) => {
                let s = self.shape(*x).to_vec();
                let (n, c, p) = (s[0], s[1], s[2] * s[3]);
                let norm = T::one() / T::from_usize(c * p).unwrap();
                let mut dx = Tensor::zeros(&s);
                for smp in 0..n {
                    let gg = &g.data()[smp * c * c..(smp + 1) * c * c];
                    let sym: Vec<T> = (0..c * c).map(|k| gg[k] + gg[(k % c) * c + k / c]).collect();
                    let f = &self.value(*x).data()[smp * c * p..(smp + 1) * c * p];
                    matmul(Mat::new(&sym, c, c), Mat::new(f, c, p), &mut dx.data_mut()[smp * c * p..(smp + 1) * c * p], norm, T::zero());
                }
                self.acc(grads, *x, dx);
            }
        }
    }

    fn back_conv(&self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geom = ConvGeom { in_h: xs[2], in_w: xs[3], kernel: ws[2], stride: opts.stride, pad: opts.pad, dilation: opts.dilation };
        let (n, c, o) = (xs[0], xs[1], ws[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let ckk = c * geom.kernel * geom.kernel;
        let chw = c * xs[2] * xs[3];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let tiles = row_tiles(oh, ow, ckk);
        let mut cols = Vec::new();
        let mut dw = self.rg(w).then(|| Tensor::zeros(&ws));
        let mut dx = self.rg(x).then(|| Tensor::zeros(&xs));
        for s in 0..n {
            let gy = &g.data()[s * o * plane..(s + 1) * o * plane];
            for &(r0, r1) in &tiles {
                let tn = (r1 - r0) * ow;
                cols.resize(ckk * tn, T::zero());
                let gt = Mat::new(&gy[r0 * ow..], o, tn).with_ld(plane);
                if let Some(dw) = dw.as_mut() {
                    im2col_rows(&xv[s * chw..(s + 1) * chw], c, &geom, r0, r1, &mut cols);
                    matmul(gt, Mat::t(&cols, ckk, tn), dw.data_mut(), T::one(), T::one());
                }
                if let Some(dx) = dx.as_mut() {
                    matmul(Mat::t(wv, o, ckk), gt, &mut cols, T::one(), T::zero());
                    col2im_rows(&cols, c, &geom, r0, r1, &mut dx.data_mut()[s * chw..(s + 1) * chw]);
                }
            }
        }
        if let Some(dw) = dw {
            self.acc(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.acc(grads, x, dx);
        }
        if let Some(b) = b {
            self.acc(grads, b, bias_grad(g, o, plane));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_conv_t(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, out_shape: &[usize], g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, o, k) = (xs[0], xs[1], ws[1], ws[2]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let geom = ConvGeom { in_h: oh, in_w: ow, kernel: k, stride, pad, dilation: 1 };
        let okk = o * k * k;
        let (sh, sw) = (xs[2], xs[3]);
        let hw = sh * sw;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let tiles = row_tiles(sh, sw, okk);
        let mut cols = Vec::new();
        let mut dw = self.rg(w).then(|| Tensor::zeros(&ws));
        let mut dx = self.rg(x).then(|| Tensor::zeros(&xs));
        for s in 0..n {
            let gy = &g.data()[s * o * oh * ow..(s + 1) * o * oh * ow];
            let xn = &xv[s * c * hw..(s + 1) * c * hw];
            for &(r0, r1) in &tiles {
                let tn = (r1 - r0) * sw;
                cols.resize(okk * tn, T::zero());
                im2col_rows(gy, o, &geom, r0, r1, &mut cols);
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx.data_mut()[s * c * hw..(s + 1) * c * hw];
                    matmul_strided(Mat::new(wv, c, okk), Mat::new(&cols, okk, tn), &mut dst[r0 * sw..], hw, T::one(), T::zero());
                }
                if let Some(dw) = dw.as_mut() {
                    matmul(Mat::new(&xn[r0 * sw..], c, tn).with_ld(hw), Mat::t(&cols, okk, tn), dw.data_mut(), T::one(), T::one());
                }
            }
        }
        if let Some(dw) = dw {
            self.acc(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.acc(grads, x, dx);
        }
        if let Some(b) = b {
            self.acc(grads, b, bias_grad(g, o, oh * ow));
        }
    }

    fn back_attention(&self, x: Var, samples: &[AttentionSample<T>], temperature: f64, eps: f64, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xs = self.shape(x).to_vec();
        let (c, p) = (xs[1], xs[2] * xs[3]);
        let mut dx = g.clone();
        let inv_t = T::c(1.0 / temperature);
        for (s, smp) in samples.iter().enumerate() {
            if smp.holes.is_empty() {
                continue;
            }
            let (h, k) = (smp.holes.len(), smp.known.len());
            let xv = &self.value(x).data()[s * c * p..(s + 1) * c * p];
            let gs = &g.data()[s * c * p..(s + 1) * c * p];
            let fh = gather_cols(xv, c, p, &smp.holes);
            let fk = gather_cols(xv, c, p, &smp.known);
            let nh = normalize_cols(&fh, c, h, eps);
            let nk = normalize_cols(&fk, c, k, eps);
            let gh = gather_cols(gs, c, p, &smp.holes);
            let a = &smp.weights;

            // value path: d Fk += G A
            let mut dfk = vec![T::zero(); c * k];
            matmul(Mat::new(&gh, c, h), Mat::new(a, h, k), &mut dfk, T::one(), T::zero());
            // dA = G^T Fk
            let mut da = vec![T::zero(); h * k];
            matmul(Mat::t(&gh, c, h), Mat::new(&fk, c, k), &mut da, T::one(), T::zero());
            // softmax backward, then the 1/temperature factor
            for (arow, drow) in a.chunks(k).zip(da.chunks_mut(k)) {
                let dot: T = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                for (d, &av) in drow.iter_mut().zip(arow) {
                    *d = av * (*d - dot) * inv_t;
                }
            }
            let mut dnh = vec![T::zero(); c * h];
            matmul(Mat::new(&nk, c, k), Mat::t(&da, h, k), &mut dnh, T::one(), T::zero());
            let mut dnk = vec![T::zero(); c * k];
            matmul(Mat::new(&nh, c, h), Mat::new(&da, h, k), &mut dnk, T::one(), T::zero());

            let dfh = normalize_cols_backward(&fh, &dnh, c, h, eps);
            let dfk_norm = normalize_cols_backward(&fk, &dnk, c, k, eps);
            let dd = &mut dx.data_mut()[s * c * p..(s + 1) * c * p];
            for ch in 0..c {
                for (j, &pos) in smp.holes.iter().enumerate() {
                    dd[ch * p + pos] += dfh[ch * h + j];
                }
                for (j, &pos) in smp.known.iter().enumerate() {
                    dd[ch * p + pos] += dfk[ch * k + j] + dfk_norm[ch * k + j];
                }
            }
        }
        self.acc(grads, x, dx);
    }
}

fn bias_grad<T: Real>(g: &Tensor<T>, o: usize, plane: usize) -> Tensor<T> {
    let mut db = Tensor::zeros(&[o]);
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        db.data_mut()[i % o] += chunk.iter().copied().sum::<T>();
    }
    db
}

/// Columns `idx` of a row-major `[c, p]` matrix, as `[c, idx.len()]`.
fn gather_cols<T: Real>(m: &[T], c: usize, p: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(c * idx.len());
    for ch in 0..c {
        let row = &m[ch * p..(ch + 1) * p];
        out.extend(idx.iter().map(|&i| row[i]));
    }
    out
}

fn col_norms<T: Real>(m: &[T], c: usize, n: usize) -> Vec<T> {
    let mut sq = vec![T::zero(); n];
    for ch in 0..c {
        for (s, &v) in sq.iter_mut().zip(&m[ch * n..(ch + 1) * n]) {
            *s += v * v;
        }
    }
    sq.into_iter().map(|v| v.sqrt()).collect()
}

fn normalize_cols<T: Real>(m: &[T], c: usize, n: usize, eps: f64) -> Vec<T> {
    let norms = col_norms(m, c, n);
    let e = T::c(eps);
    let mut out = m.to_vec();
    for ch in 0..c {
        for (v, &r) in out[ch * n..(ch + 1) * n].iter_mut().zip(&norms) {
            *v = *v / (r + e);
        }
    }
    out
}

/// Backward of `f / (|f| + eps)` per column.
fn normalize_cols_backward<T: Real>(f: &[T], dn: &[T], c: usize, n: usize, eps: f64) -> Vec<T> {
    let norms = col_norms(f, c, n);
    let e = T::c(eps);
    let mut dots = vec![T::zero(); n];
    for ch in 0..c {
        for j in 0..n {
            dots[j] += f[ch * n + j] * dn[ch * n + j];
        }
    }
    let mut out = vec![T::zero(); c * n];
    for ch in 0..c {
        for j in 0..n {
            let d = norms[j] + e;
            let radial = if norms[j] > T::zero() { f[ch * n + j] * dots[j] / (d * d * norms[j]) } else { T::zero() };
            out[ch * n + j] = dn[ch * n + j] / d - radial;
        }
    }
    out
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every named parameter reached by the backward pass.
    pub fn params(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        graph
            .param_vars()
            .iter()
            .filter_map(|(k, &v)| self.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
