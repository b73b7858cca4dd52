use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Norm floor of the per-pixel normalization. Pixels with a smaller norm are
/// divided by this value instead, which maps an all-zero pixel to zero.
pub const NORM_EPS: f64 = 1e-8;

/// Tolerance of the unit-norm column invariant.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Per-pixel linear embedding `x -> W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    /// `(c_out, c_in)`
    pub weight: Array2<f64>,
    /// `(c_out,)`
    pub bias: Array1<f64>,
}

impl EmbedParams {
    pub fn identity(c: usize) -> Self {
        EmbedParams {
            weight: Array2::eye(c),
            bias: Array1::zeros(c),
        }
    }

    pub fn random<R: Rng>(c_out: usize, c_in: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / c_in as f64).sqrt()).expect("valid std");
        EmbedParams {
            weight: Array2::from_shape_fn((c_out, c_in), |_| normal.sample(rng)),
            bias: Array1::from_shape_fn(c_out, |_| 0.1 * normal.sample(rng)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        EmbedParams {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &EmbedParams) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

/// Unit-normalized pixel features of one slice, as a `c x hw` matrix whose
/// columns are pixels in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEmbedding {
    pub matrix: Array2<f64>,
    pub grid: (usize, usize),
    /// Pixels whose pre-normalization norm fell below [`NORM_EPS`].
    pub floored: usize,
}

impl PixelEmbedding {
    /// Wraps an already-normalized matrix, checking the unit-column invariant.
    pub fn from_unit_columns(matrix: Array2<f64>, grid: (usize, usize)) -> Result<Self> {
        if matrix.nrows() == 0 || grid.0 * grid.1 != matrix.ncols() {
            return Err(Error::Shape(format!(
                "embedding matrix {:?} does not match grid {grid:?}",
                matrix.dim()
            )));
        }
        for (k, col) in matrix.axis_iter(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Shape(format!("column {k} has norm {norm}")));
            }
        }
        Ok(PixelEmbedding {
            matrix,
            grid,
            floored: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_pixels(&self) -> usize {
        self.matrix.ncols()
    }
}

/// What the backward pass of [`normalize_embed`] needs.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    /// Input features reshaped to `(c_in, hw)`.
    input: Array2<f64>,
    /// Normalized output, `(c_out, hw)`.
    output: Array2<f64>,
    /// Pre-normalization column norms.
    norms: Vec<f64>,
    grid: (usize, usize),
}

fn flatten(fmap: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = fmap.dim();
    fmap.to_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous owned array")
}

/// `X = N(E(F))`: embeds every pixel, L2-normalizes it and reshapes the map
/// to `c x hw`.
pub fn normalize_embed(fmap: ArrayView3<f64>, embed: &EmbedParams) -> Result<PixelEmbedding> {
    normalize_embed_cached(fmap, embed).map(|(x, _)| x)
}

pub fn normalize_embed_cached(
    fmap: ArrayView3<f64>,
    embed: &EmbedParams,
) -> Result<(PixelEmbedding, EmbedCache)> {
    let (c, h, w) = fmap.dim();
    if c != embed.in_channels() {
        return Err(Error::Shape(format!(
            "feature map has {c} channels, embedding expects {}",
            embed.in_channels()
        )));
    }
    let input = flatten(fmap);
    let mut out = embed.weight.dot(&input);
    out += &embed.bias.view().insert_axis(Axis(1));
    let mut norms = Vec::with_capacity(h * w);
    let mut floored = 0;
    for mut col in out.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        norms.push(norm);
        if norm < NORM_EPS {
            floored += 1;
        }
        let denom = norm.max(NORM_EPS);
        col.mapv_inplace(|v| v / denom);
    }
    let embedding = PixelEmbedding {
        matrix: out.clone(),
        grid: (h, w),
        floored,
    };
    Ok((
        embedding,
        EmbedCache {
            input,
            output: out,
            norms,
            grid: (h, w),
        },
    ))
}

/// Backpropagates `dL/dX` to the feature map and the embedding parameters.
pub fn normalize_embed_backward(
    cache: &EmbedCache,
    embed: &EmbedParams,
    grad_x: &Array2<f64>,
) -> (Array3<f64>, EmbedParams) {
    let mut grad_pre = grad_x.clone();
    for (k, mut g) in grad_pre.axis_iter_mut(Axis(1)).enumerate() {
        let norm = cache.norms[k];
        if norm < NORM_EPS {
            g.mapv_inplace(|v| v / NORM_EPS);
        } else {
            let y = cache.output.column(k);
            let proj = y.dot(&g);
            g.zip_mut_with(&y, |gv, &yv| *gv = (*gv - yv * proj) / norm);
        }
    }
    let grad_weight = grad_pre.dot(&cache.input.t());
    let grad_bias = grad_pre.sum_axis(Axis(1));
    let grad_input = embed.weight.t().dot(&grad_pre);
    let (h, w) = cache.grid;
    let grad_fmap = grad_input
        .into_shape_with_order((embed.in_channels(), h, w))
        .expect("contiguous");
    (
        grad_fmap,
        EmbedParams {
            weight: grad_weight,
            bias: grad_bias,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_embedding_normalizes_pixels() {
        let mut fmap = Array3::zeros((2, 3, 3));
        fmap.index_axis_mut(Axis(0), 0).fill(3.0);
        fmap.index_axis_mut(Axis(0), 1).fill(4.0);
        let x = normalize_embed(fmap.view(), &EmbedParams::identity(2)).unwrap();
        assert_eq!(x.matrix.dim(), (2, 9));
        for col in x.matrix.axis_iter(Axis(1)) {
            assert!((col[0] - 0.6).abs() < 1e-12 && (col[1] - 0.8).abs() < 1e-12);
        }
        assert_eq!(x.floored, 0);
    }

    #[test]
    fn zero_pixel_is_floored_and_counted() {
        let mut fmap = Array3::ones((2, 2, 2));
        fmap[[0, 1, 1]] = 0.0;
        fmap[[1, 1, 1]] = 0.0;
        let x = normalize_embed(fmap.view(), &EmbedParams::identity(2)).unwrap();
        assert_eq!(x.floored, 1);
        let col = x.matrix.column(3);
        assert!(col.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn random_maps_have_unit_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let fmap = Array3::from_shape_fn((5, 4, 6), |_| normal.sample(&mut rng));
        let embed = EmbedParams::random(7, 5, &mut rng);
        let x = normalize_embed(fmap.view(), &embed).unwrap();
        assert_eq!(x.matrix.dim(), (7, 24));
        for col in x.matrix.axis_iter(Axis(1)) {
            let n = col.dot(&col).sqrt();
            assert!((1.0 - UNIT_NORM_TOL..=1.0 + UNIT_NORM_TOL).contains(&n));
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let fmap = Array3::<f64>::ones((3, 2, 2));
        assert!(normalize_embed(fmap.view(), &EmbedParams::identity(2)).is_err());
    }
}
