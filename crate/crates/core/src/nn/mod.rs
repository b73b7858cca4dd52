//! Minimal f32 layers with explicit forward caches and hand-written
//! backward passes. Activations are `(channels, height, width)`; one sample
//! at a time.

mod layers;
mod param;

pub use layers::{
    relu, relu_backward, Conv2d, ConvCache, GroupNorm, Linear, MaxPool2, NormCache, PoolCache,
    UpConv2, NORM_EPSILON,
};
pub use param::{Param, Parameterized};
