//! Network definitions: the multi-task generator and the patch discriminator.

pub mod discriminator;
pub mod generator;
pub mod landmark_head;
pub mod layers;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use discriminator::Discriminator;
pub use generator::{EncoderOutput, Generator, GeneratorOutput};
pub use landmark_head::LandmarkHead;
pub use params::{Init, ParamSpec, ParamStore};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input resolution; must be divisible by 4.
    pub image_size: usize,
    /// Encoder widths at full, half and quarter resolution. The last one is
    /// the shared-feature width.
    pub channels: [usize; 3],
    pub residual_blocks: usize,
    pub dilation: usize,
    /// Landmark-head branch widths, strictly increasing.
    pub landmark_branches: Vec<usize>,
    pub landmark_map_size: usize,
    pub landmark_map_channels: usize,
    /// Softmax temperature applied to cosine similarities in the attention.
    pub attention_temperature: f64,
    /// Discriminator widths of the four hidden conv layers.
    pub disc_channels: [usize; 4],
}

impl ModelConfig {
    /// Full-width 256x256 configuration.
    pub fn full() -> Self {
        ModelConfig {
            image_size: 256,
            channels: [64, 128, 256],
            residual_blocks: 4,
            dilation: 2,
            landmark_branches: vec![64, 128, 256],
            landmark_map_size: 128,
            landmark_map_channels: 68,
            attention_temperature: 0.1,
            disc_channels: [64, 128, 256, 512],
        }
    }

    /// 32x32, quarter-width variant for fast tests and gradient checks.
    pub fn reduced() -> Self {
        ModelConfig {
            image_size: 32,
            channels: [16, 32, 64],
            residual_blocks: 2,
            landmark_branches: vec![16, 32, 64],
            disc_channels: [16, 32, 64, 128],
            ..Self::full()
        }
    }

    /// Spatial size of the shared feature.
    pub fn share_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!("image_size {} must be a multiple of 4 and at least 8", self.image_size)));
        }
        if self.channels.iter().any(|&c| c == 0) || self.disc_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        if self.landmark_branches.is_empty() || self.landmark_branches.windows(2).any(|w| w[0] >= w[1]) || self.landmark_branches[0] == 0 {
            return Err(Error::Config(format!("landmark branches {:?} must be positive and strictly increasing", self.landmark_branches)));
        }
        if self.landmark_map_size < 2 || self.landmark_map_channels == 0 {
            return Err(Error::Config("landmark map must be at least 2x2 with one channel".into()));
        }
        if !(self.attention_temperature > 0.0) {
            return Err(Error::Config("attention temperature must be positive".into()));
        }
        Ok(())
    }
}
