//! Multi-task generator.
//!
//! Dataflow for one pass:
//!
//! 1. encoder: three gated conv blocks (`S -> S/2 -> S/4`), dilated residual
//!    blocks, hole-to-known attention, giving `f_share` plus two skip features;
//! 2. image head: gated transposed-conv upsampling, `F1` fuses the half
//!    resolution skip into `f1`;
//! 3. landmark head reads `f_share` and `f1` and predicts 136 values;
//! 4. the predicted points are rasterized (68 identical channels), resized to
//!    `f1`'s resolution and fused by `F2`;
//! 5. second upsampling block, `F3` fuses the full-resolution skip, a 7x7
//!    conv and `(tanh + 1) / 2` give the raw image;
//! 6. the raw image is composited with the input outside the hole.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::landmark_head::LandmarkHead;
use crate::model::layers::{Conv2d, GatedConv, ResidualBlock};
use crate::model::params::{ParamSpec, ParamStore};
use crate::model::ModelConfig;
use crate::tensor::{resize_bilinear, Real, Tensor};
use crate::types::{rasterize_landmarks, BinaryMask, LandmarkMapStack, LandmarkSet};

#[derive(Debug, Clone)]
pub struct Generator {
    config: ModelConfig,
    pub encoder: [GatedConv; 3],
    pub blocks: Vec<ResidualBlock>,
    pub up1: GatedConv,
    pub fuse1: Conv2d,
    pub fuse2: Conv2d,
    pub up2: GatedConv,
    pub fuse3: Conv2d,
    pub output: Conv2d,
    pub landmarks: LandmarkHead,
}

pub struct EncoderOutput {
    pub f_share: Var,
    /// Encoder features at full and half resolution.
    pub skips: [Var; 2],
    /// Output of each encoder block, in order.
    pub stages: [Var; 3],
    /// Hole flags at shared-feature resolution, per sample.
    pub hole: Vec<bool>,
}

pub struct GeneratorOutput {
    /// Generator output before compositing, `[N, 3, S, S]` in `[0, 1]`.
    pub raw: Var,
    /// Composited image.
    pub image: Var,
    /// Predicted landmarks, `[N, 136]`.
    pub landmarks: Var,
    pub f_share: Var,
    pub f1: Var,
    pub landmark_maps: Vec<LandmarkMapStack>,
}

impl Generator {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3] = config.channels;
        let encoder = [
            GatedConv::new(Conv2d::new("gen.enc1", 4, c1, 7).pad(3)),
            GatedConv::new(Conv2d::new("gen.enc2", c1, c2, 4).stride(2).pad(1)),
            GatedConv::new(Conv2d::new("gen.enc3", c2, c3, 4).stride(2).pad(1)),
        ];
        let blocks = (0..config.residual_blocks)
            .map(|i| ResidualBlock::new(&format!("gen.res{i}"), c3, config.dilation))
            .collect();
        let lm_ch = config.landmark_map_channels;
        Ok(Generator {
            encoder,
            blocks,
            up1: GatedConv::new(Conv2d::new("gen.up1", c3, c2, 4).stride(2).pad(1).transposed()),
            fuse1: Conv2d::new("gen.fuse1", 2 * c2, c2, 1),
            fuse2: Conv2d::new("gen.fuse2", c2 + lm_ch, c2, 1),
            up2: GatedConv::new(Conv2d::new("gen.up2", c2, c1, 4).stride(2).pad(1).transposed()),
            fuse3: Conv2d::new("gen.fuse3", 2 * c1, c1, 1),
            output: Conv2d::new("gen.out", c1, 3, 7).pad(3),
            landmarks: LandmarkHead::new("gen.landmark", c3, c2, &config.landmark_branches),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v: Vec<ParamSpec> = self.encoder.iter().flat_map(|e| e.specs()).collect();
        v.extend(self.blocks.iter().flat_map(|b| b.specs()));
        v.extend(self.up1.specs());
        v.extend(self.fuse1.specs());
        v.extend(self.fuse2.specs());
        v.extend(self.up2.specs());
        v.extend(self.fuse3.specs());
        v.extend(self.output.specs());
        v.extend(self.landmarks.specs());
        v
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl rand::Rng) -> ParamStore<T> {
        ParamStore::init(&self.specs(), rng)
    }

    fn check_inputs<T: Real>(&self, images: &Tensor<T>, masks: &[BinaryMask]) -> Result<usize> {
        let s = self.config.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!("generator expects [N, 3, {s}, {s}] images, got {shape:?}")));
        }
        if masks.len() != shape[0] {
            return Err(Error::Shape(format!("{} masks for {} images", masks.len(), shape[0])));
        }
        if let Some(m) = masks.iter().find(|m| m.width() != s || m.height() != s) {
            return Err(Error::Shape(format!("mask is {}x{}, model expects {s}x{s}", m.width(), m.height())));
        }
        Ok(shape[0])
    }

    /// Encoder input: hole pixels zeroed, mask appended as a fourth channel.
    pub fn encoder_input<T: Real>(&self, images: &Tensor<T>, masks: &[BinaryMask]) -> Result<Tensor<T>> {
        let n = self.check_inputs(images, masks)?;
        let s = self.config.image_size;
        let plane = s * s;
        let mut data = Vec::with_capacity(n * 4 * plane);
        for (i, mask) in masks.iter().enumerate() {
            let img = &images.data()[i * 3 * plane..(i + 1) * 3 * plane];
            for c in 0..3 {
                data.extend(img[c * plane..(c + 1) * plane].iter().zip(mask.data()).map(|(&v, &m)| if m == 1 { T::zero() } else { v }));
            }
            data.extend(mask.data().iter().map(|&m| T::c(m as f64)));
        }
        Tensor::from_vec(&[n, 4, s, s], data)
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &Tensor<T>, masks: &[BinaryMask]) -> Result<EncoderOutput> {
        let input = g.input(self.encoder_input(images, masks)?);
        let e1 = self.encoder[0].forward(g, store, input)?;
        let e2 = self.encoder[1].forward(g, store, e1)?;
        let e3 = self.encoder[2].forward(g, store, e2)?;
        let mut h = e3;
        for block in &self.blocks {
            h = block.forward(g, store, h)?;
        }
        let factor = self.config.image_size / self.config.share_size();
        let hole: Vec<bool> = masks.iter().flat_map(|m| m.downsample(factor).data().to_vec()).map(|v| v == 1).collect();
        let f_share = g.attention(h, &hole, self.config.attention_temperature, 1e-6)?;
        Ok(EncoderOutput { f_share, skips: [e1, e2], stages: [e1, e2, e3], hole })
    }

    /// Rasterized landmark stacks for a `[N, 136]` prediction, resized to `size`.
    pub fn landmark_feedback<T: Real>(&self, predicted: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<LandmarkMapStack>)> {
        let n = predicted.dim(0);
        let ms = self.config.landmark_map_size;
        let ch = self.config.landmark_map_channels;
        let mut stacks = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * ch * size * size);
        for i in 0..n {
            let row = predicted.index0(i);
            let values: Vec<f32> = row.data().iter().map(|v| v.f64() as f32).collect();
            let set = LandmarkSet::new(values)?;
            let stack = rasterize_landmarks(&set, ms, ch);
            let plane: Vec<T> = stack.plane().iter().map(|&v| T::c(v as f64)).collect();
            let resized = resize_bilinear(&plane, 1, ms, ms, size, size);
            for _ in 0..ch {
                data.extend_from_slice(&resized);
            }
            stacks.push(stack);
        }
        Ok((Tensor::from_vec(&[n, ch, size, size], data)?, stacks))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &Tensor<T>, masks: &[BinaryMask]) -> Result<GeneratorOutput> {
        let enc = self.encode(g, store, images, masks)?;
        let [skip_full, skip_half] = enc.skips;

        let u1 = self.up1.forward(g, store, enc.f_share)?;
        let cat = g.concat(&[u1, skip_half])?;
        let f1 = self.fuse1.forward(g, store, cat)?;

        let landmarks = self.landmarks.forward(g, store, enc.f_share, f1)?;
        let half = g.shape(f1)[2];
        let (maps, landmark_maps) = self.landmark_feedback(g.value(landmarks), half)?;
        let maps = g.input(maps);
        let cat = g.concat(&[f1, maps])?;
        let f2 = self.fuse2.forward(g, store, cat)?;

        let u2 = self.up2.forward(g, store, f2)?;
        let cat = g.concat(&[u2, skip_full])?;
        let f3 = self.fuse3.forward(g, store, cat)?;
        let out = self.output.forward(g, store, f3)?;
        let out = g.tanh(out);
        let raw = g.affine(out, 0.5, 0.5);

        let image = self.composite(g, raw, images, masks)?;
        Ok(GeneratorOutput { raw, image, landmarks, f_share: enc.f_share, f1, landmark_maps })
    }

    /// Raw output inside the hole, input image elsewhere.
    pub fn composite<T: Real>(&self, g: &mut Graph<T>, raw: Var, images: &Tensor<T>, masks: &[BinaryMask]) -> Result<Var> {
        let plane = self.config.image_size * self.config.image_size;
        let select: Vec<bool> = masks.iter().flat_map(|m| (0..3).flat_map(move |_| m.data().iter().map(|&v| v == 1))).collect();
        debug_assert_eq!(select.len(), masks.len() * 3 * plane);
        let original = g.input(images.clone());
        g.select(Arc::new(select), raw, original)
    }
}
