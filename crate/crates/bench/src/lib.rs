//! Input generators shared by the benchmarks.

use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sal_core::losses::{normalize_embed, EmbedParams, PixelEmbedding};

pub fn feature_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((c, h, w), |_| StandardNormal.sample(&mut rng))
}

pub fn image(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((c, h, w), |_| StandardNormal.sample(&mut rng))
}

pub fn embedded(fmap: ArrayView3<f64>) -> PixelEmbedding {
    normalize_embed(fmap, &EmbedParams::identity(fmap.dim().0)).expect("valid map")
}
