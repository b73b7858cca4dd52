use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::param::{join, Param, Parameterized};

/// Square convolution, stride 1, zero padding that preserves the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// `[c_out, c_in, k, k]`
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f32>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        Conv2d {
            k,
            c_in,
            c_out,
            weight: Param::he(&[c_out, c_in, k, k], c_in * k * k, rng),
            bias: Param::zeros(&[c_out]),
        }
    }

    fn im2col(&self, x: &Array3<f32>) -> Array2<f32> {
        let (c, h, w) = x.dim();
        let (k, p) = (self.k, self.k / 2);
        let hw = h * w;
        if k == 1 {
            return x
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, hw))
                .expect("contiguous");
        }
        let src = x.as_standard_layout();
        let src = src.as_slice().expect("contiguous");
        let mut cols = vec![0.0f32; c * k * k * hw];
        for ci in 0..c {
            let plane = &src[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * hw;
                    let dx = kx as isize - p as isize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    for y in 0..h {
                        let yy = y as isize + ky as isize - p as isize;
                        if yy < 0 || yy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let s = yy as usize * w;
                        let d = row + y * w;
                        let xs = (x_lo as isize + dx) as usize;
                        cols[d + x_lo..d + x_hi]
                            .copy_from_slice(&plane[s + xs..s + xs + (x_hi - x_lo)]);
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, hw), cols).expect("sized")
    }

    fn col2im(&self, cols: &Array2<f32>, h: usize, w: usize) -> Array3<f32> {
        let (k, p, c) = (self.k, self.k / 2, self.c_in);
        let hw = h * w;
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("contiguous");
        if k == 1 {
            return Array3::from_shape_vec((c, h, w), src.to_vec()).expect("sized");
        }
        let mut out = vec![0.0f32; c * hw];
        for ci in 0..c {
            let plane = &mut out[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * hw;
                    let dx = kx as isize - p as isize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    for y in 0..h {
                        let yy = y as isize + ky as isize - p as isize;
                        if yy < 0 || yy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let s = yy as usize * w;
                        let d = row + y * w;
                        let xs = (x_lo as isize + dx) as usize;
                        for (o, v) in plane[s + xs..s + xs + (x_hi - x_lo)]
                            .iter_mut()
                            .zip(&src[d + x_lo..d + x_hi])
                        {
                            *o += v;
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((c, h, w), out).expect("sized")
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let cols = self.im2col(x);
        let mut y = self.weight.matrix().dot(&cols);
        y += &self.bias.vector().insert_axis(Axis(1));
        let y = y.into_shape_with_order((self.c_out, h, w)).expect("contiguous");
        (y, ConvCache { cols, h, w })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, grad_y: &Array3<f32>) -> Array3<f32> {
        let gy = as_matrix(grad_y);
        general_mat_mul(1.0, &gy, &cache.cols.t(), 1.0, &mut self.weight.grad_matrix_mut());
        self.bias.grad_vector_mut().scaled_add(1.0, &gy.sum_axis(Axis(1)));
        let gcols = self.weight.matrix().t().dot(&gy);
        self.col2im(&gcols, cache.h, cache.w)
    }
}

fn as_matrix(a: &Array3<f32>) -> ArrayView2<'_, f32> {
    let (c, h, w) = a.dim();
    a.view()
        .into_shape_with_order((c, h * w))
        .expect("standard layout activation")
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 2x2 transposed convolution with stride 2; doubles the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv2 {
    pub c_in: usize,
    pub c_out: usize,
    /// `[c_out, 2, 2, c_in]`
    pub weight: Param,
    pub bias: Param,
}

impl UpConv2 {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        UpConv2 {
            c_in,
            c_out,
            weight: Param::he(&[c_out, 2, 2, c_in], c_in, rng),
            bias: Param::zeros(&[c_out]),
        }
    }

    fn flat_weight(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.c_out * 4, self.c_in), &self.weight.value).expect("shape")
    }

    /// Returns the output; the cache is the input itself.
    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "upconv input channels");
        let z = self.flat_weight().dot(&as_matrix(x));
        let mut y = Array3::zeros((self.c_out, 2 * h, 2 * w));
        for co in 0..self.c_out {
            let b = self.bias.value[co];
            for a in 0..2 {
                for bb in 0..2 {
                    let row = z.row(co * 4 + a * 2 + bb);
                    for i in 0..h {
                        for j in 0..w {
                            y[[co, 2 * i + a, 2 * j + bb]] = row[i * w + j] + b;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, input: &Array3<f32>, grad_y: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = input.dim();
        let mut gz = Array2::<f32>::zeros((self.c_out * 4, h * w));
        let mut gb = vec![0.0f32; self.c_out];
        for co in 0..self.c_out {
            for a in 0..2 {
                for bb in 0..2 {
                    let mut row = gz.row_mut(co * 4 + a * 2 + bb);
                    for i in 0..h {
                        for j in 0..w {
                            let g = grad_y[[co, 2 * i + a, 2 * j + bb]];
                            row[i * w + j] = g;
                            gb[co] += g;
                        }
                    }
                }
            }
        }
        let x = as_matrix(input);
        let mut gw =
            ndarray::ArrayViewMut2::from_shape((self.c_out * 4, self.c_in), &mut self.weight.grad)
                .expect("shape");
        general_mat_mul(1.0, &gz, &x.t(), 1.0, &mut gw);
        for (g, d) in self.bias.grad.iter_mut().zip(gb) {
            *g += d;
        }
        self.flat_weight()
            .t()
            .dot(&gz)
            .into_shape_with_order((c, h, w))
            .expect("contiguous")
    }
}

impl Parameterized for UpConv2 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Group normalization with a per-channel affine transform. Statistics are
/// computed per sample, so training and inference behave the same.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Array3<f32>,
    inv_std: Vec<f32>,
}

pub const NORM_EPSILON: f32 = 1e-5;

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "groups must divide channels");
        let mut weight = Param::zeros(&[channels]);
        weight.value.iter_mut().for_each(|v| *v = 1.0);
        GroupNorm {
            groups,
            channels,
            weight,
            bias: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, NormCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.channels, "norm channels");
        let per = c / self.groups * h * w;
        let mut xhat = x.as_standard_layout().into_owned();
        let mut inv_std = Vec::with_capacity(self.groups);
        let data = xhat.as_slice_mut().expect("standard layout");
        for chunk in data.chunks_mut(per) {
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
            let inv = 1.0 / (var + NORM_EPSILON as f64).sqrt();
            chunk
                .iter_mut()
                .for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
            inv_std.push(inv as f32);
        }
        let mut y = xhat.clone();
        for (ch, mut plane) in y.outer_iter_mut().enumerate() {
            let (g, b) = (self.weight.value[ch], self.bias.value[ch]);
            plane.mapv_inplace(|v| g * v + b);
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, grad_y: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = grad_y.dim();
        let hw = h * w;
        let mut dxhat = grad_y.as_standard_layout().into_owned();
        for ch in 0..c {
            let (gy, xh) = (grad_y.index_axis(Axis(0), ch), cache.xhat.index_axis(Axis(0), ch));
            self.weight.grad[ch] += (&gy * &xh).sum();
            self.bias.grad[ch] += gy.sum();
            let gamma = self.weight.value[ch];
            dxhat.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * gamma);
        }
        let per = c / self.groups * hw;
        let xh = cache.xhat.as_slice().expect("standard layout");
        let d = dxhat.as_slice_mut().expect("standard layout");
        for (gi, (dchunk, xchunk)) in d.chunks_mut(per).zip(xh.chunks(per)).enumerate() {
            let sum_d: f64 = dchunk.iter().map(|&v| v as f64).sum();
            let sum_dx: f64 = dchunk.iter().zip(xchunk).map(|(&a, &b)| a as f64 * b as f64).sum();
            let n = per as f64;
            let inv = cache.inv_std[gi] as f64;
            for (dv, &xv) in dchunk.iter_mut().zip(xchunk) {
                *dv = (inv / n * (n * *dv as f64 - sum_d - xv as f64 * sum_dx)) as f32;
            }
        }
        dxhat
    }
}

impl Parameterized for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 2x2 max pooling, stride 2.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaxPool2;

#[derive(Debug, Clone)]
pub struct PoolCache {
    /// Winning offset `2a + b` inside each 2x2 cell.
    argmax: Array3<u8>,
}

impl MaxPool2 {
    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, PoolCache) {
        let (c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Array3::zeros((c, ho, wo));
        let mut arg = Array3::zeros((c, ho, wo));
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = x[[ch, 2 * i, 2 * j]];
                    let mut k = 0u8;
                    for (o, (a, b)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = x[[ch, 2 * i + a, 2 * j + b]];
                        if v > best {
                            best = v;
                            k = o as u8 + 1;
                        }
                    }
                    y[[ch, i, j]] = best;
                    arg[[ch, i, j]] = k;
                }
            }
        }
        (y, PoolCache { argmax: arg })
    }

    pub fn backward(&self, cache: &PoolCache, grad_y: &Array3<f32>) -> Array3<f32> {
        let (c, ho, wo) = grad_y.dim();
        let mut gx = Array3::zeros((c, 2 * ho, 2 * wo));
        for ((ch, i, j), &g) in grad_y.indexed_iter() {
            let k = cache.argmax[[ch, i, j]] as usize;
            gx[[ch, 2 * i + k / 2, 2 * j + k % 2]] = g;
        }
        gx
    }
}

pub fn relu(mut x: Array3<f32>) -> Array3<f32> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Gradient of [`relu`] given its output.
pub fn relu_backward(output: &Array3<f32>, mut grad: Array3<f32>) -> Array3<f32> {
    grad.zip_mut_with(output, |g, &y| {
        if y <= 0.0 {
            *g = 0.0
        }
    });
    grad
}

/// Dense layer on vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::he(&[c_out, c_in], c_in, rng),
            bias: Param::zeros(&[c_out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Array1<f32>) -> Array1<f32> {
        self.weight.matrix().dot(x) + self.bias.vector()
    }

    pub fn backward(&mut self, x: &Array1<f32>, grad_y: &Array1<f32>) -> Array1<f32> {
        let outer = grad_y
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        self.weight.grad_matrix_mut().scaled_add(1.0, &outer);
        self.bias.grad_vector_mut().scaled_add(1.0, grad_y);
        self.weight.matrix().t().dot(grad_y)
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
