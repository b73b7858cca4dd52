//! Reference 2D U-Net: a multi-scale encoder shared with pre-training, a
//! decoder with skip connections, and the two self-supervised heads.

mod checkpoint;
mod unet;

pub use checkpoint::{
    architecture_hash, load_pretrained_encoder, Checkpoint, CheckpointMeta, LoadManifest,
    RngSnapshot, TensorEntry, CHECKPOINT_FORMAT,
};
pub use unet::{
    global_average_pool, Decoder, Encoder, EncoderTrace, PretrainHeads, SegTrace,
    SegmentationModel,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channels of the first stage; stage `s` has `base_width * 2^(s-1)`.
    pub base_width: usize,
    pub stages: usize,
    /// Output size of the global projection head.
    pub proj_dim: usize,
    /// Group normalization after every 3x3 convolution; 0 disables it.
    /// Must divide `base_width`.
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            base_width: 16,
            stages: 4,
            proj_dim: 128,
            norm_groups: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.proj_dim == 0 {
            return Err(Error::Config(format!(
                "model widths must be positive (in_channels {}, base_width {}, proj_dim {})",
                self.in_channels, self.base_width, self.proj_dim
            )));
        }
        if !(1..=6).contains(&self.stages) {
            return Err(Error::Config(format!("model.stages = {} outside 1..=6", self.stages)));
        }
        if self.norm_groups > 0 && !self.base_width.is_multiple_of(self.norm_groups) {
            return Err(Error::Config(format!(
                "model.norm_groups = {} does not divide base_width {}",
                self.norm_groups, self.base_width
            )));
        }
        Ok(())
    }

    /// `c_s` for scale `s` (1-based).
    pub fn channels_at(&self, s: usize) -> usize {
        self.base_width << (s - 1)
    }

    pub fn stride_at(&self, s: usize) -> usize {
        1 << (s - 1)
    }

    /// Feature grid of scale `s` for an `h x w` input, checking divisibility
    /// by the coarsest stride.
    pub fn grid_at(&self, s: usize, h: usize, w: usize) -> Result<(usize, usize)> {
        if s == 0 || s > self.stages {
            return Err(Error::Config(format!(
                "scale {s} outside 1..={} of the encoder",
                self.stages
            )));
        }
        let deepest = self.stride_at(self.stages);
        if !h.is_multiple_of(deepest) || !w.is_multiple_of(deepest) {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the encoder stride {deepest}"
            )));
        }
        Ok((h / self.stride_at(s), w / self.stride_at(s)))
    }
}
