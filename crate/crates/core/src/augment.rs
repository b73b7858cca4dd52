//! Stochastic two-view augmentation of slices.
//!
//! A view is rendered by mapping each output pixel back into the source
//! slice (random resized crop, optional rotation and elastic displacement),
//! sampling bilinearly, optionally mirroring horizontally and finally
//! applying a random intensity gain and shift.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{SliceRecord, MIN_PLANE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the slice area.
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    /// Standard deviation of the multiplicative gain and additive shift.
    pub intensity_jitter: f64,
    /// `[H_out, W_out]`
    pub output_size: [usize; 2],
    pub rotation: bool,
    pub max_rotation_deg: f64,
    pub elastic: bool,
    /// Displacement standard deviation in output pixels.
    pub elastic_alpha: f64,
    /// Control points per side of the coarse displacement grid.
    pub elastic_grid: usize,
    /// Draw crop, flip, rotation and displacement once for both views.
    pub shared_geometry: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: [0.6, 1.0],
            flip_prob: 0.5,
            intensity_jitter: 0.1,
            output_size: [64, 64],
            rotation: false,
            max_rotation_deg: 10.0,
            elastic: false,
            elastic_alpha: 1.0,
            elastic_grid: 4,
            shared_geometry: false,
        }
    }
}

impl AugmentConfig {
    /// The pipeline that leaves a slice untouched (up to resizing).
    pub fn identity(output_size: [usize; 2]) -> Self {
        AugmentConfig {
            crop_scale: [1.0, 1.0],
            flip_prob: 0.0,
            intensity_jitter: 0.0,
            output_size,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "augment.crop_scale {:?} must satisfy 0 < low <= high <= 1",
                self.crop_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "augment.flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        if !(self.intensity_jitter >= 0.0) {
            return Err(Error::Config("augment.intensity_jitter must be >= 0".into()));
        }
        if self.output_size.iter().any(|&s| s < MIN_PLANE) {
            return Err(Error::Config(format!(
                "augment.output_size {:?} below {MIN_PLANE}",
                self.output_size
            )));
        }
        if self.elastic && self.elastic_grid < 2 {
            return Err(Error::Config("augment.elastic_grid must be >= 2".into()));
        }
        Ok(())
    }
}

/// One augmented slice. Metadata is copied verbatim from the source.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceView {
    pub pixels: Array2<f32>,
    pub subject_id: String,
    pub slice_index: usize,
    pub num_slices: usize,
    /// 0 or 1.
    pub view_id: u8,
}

#[derive(Debug, Clone)]
struct Geometry {
    /// Crop origin and size in source pixels.
    y0: f64,
    x0: f64,
    ch: f64,
    cw: f64,
    flip: bool,
    angle: f64,
    /// Coarse displacement grids `(dy, dx)` in output pixels.
    displacement: Option<(Array2<f64>, Array2<f64>)>,
}

fn sample_geometry<R: Rng + ?Sized>(
    src: (usize, usize),
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Geometry> {
    let (h, w) = (src.0 as f64, src.1 as f64);
    let [lo, hi] = cfg.crop_scale;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = scale.sqrt();
    let (ch, cw) = (h * side, w * side);
    if ch < MIN_PLANE as f64 || cw < MIN_PLANE as f64 {
        return Err(Error::InvalidArgument(format!(
            "crop of {ch:.1}x{cw:.1} pixels is smaller than {MIN_PLANE}x{MIN_PLANE}"
        )));
    }
    let y0 = if h > ch { rng.random_range(0.0..h - ch) } else { 0.0 };
    let x0 = if w > cw { rng.random_range(0.0..w - cw) } else { 0.0 };
    let flip = rng.random_bool(cfg.flip_prob);
    let angle = if cfg.rotation && cfg.max_rotation_deg > 0.0 {
        let max = cfg.max_rotation_deg.to_radians();
        rng.random_range(-max..=max)
    } else {
        0.0
    };
    let displacement = cfg.elastic.then(|| {
        let g = cfg.elastic_grid;
        let mut draw = || {
            Array2::from_shape_fn((g, g), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * cfg.elastic_alpha
            })
        };
        let dy = draw();
        let dx = draw();
        (dy, dx)
    });
    Ok(Geometry {
        y0,
        x0,
        ch,
        cw,
        flip,
        angle,
        displacement,
    })
}

/// Bilinear sample with edge clamping. Exact at integer coordinates.
fn bilinear(src: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = src.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (yf, xf) = (y.floor(), x.floor());
    let (iy, ix) = (yf as usize, xf as usize);
    let (iy1, ix1) = ((iy + 1).min(h - 1), (ix + 1).min(w - 1));
    let (fy, fx) = ((y - yf) as f32, (x - xf) as f32);
    let top = src[[iy, ix]] + (src[[iy, ix1]] - src[[iy, ix]]) * fx;
    let bottom = src[[iy1, ix]] + (src[[iy1, ix1]] - src[[iy1, ix]]) * fx;
    top + (bottom - top) * fy
}

/// Bilinear interpolation of a coarse grid spanning the output plane.
fn upsample_at(grid: &Array2<f64>, u: f64, v: f64) -> f64 {
    let (gh, gw) = grid.dim();
    let y = (u * (gh - 1) as f64).clamp(0.0, (gh - 1) as f64);
    let x = (v * (gw - 1) as f64).clamp(0.0, (gw - 1) as f64);
    let (iy, ix) = (y.floor() as usize, x.floor() as usize);
    let (iy1, ix1) = ((iy + 1).min(gh - 1), (ix + 1).min(gw - 1));
    let (fy, fx) = (y - iy as f64, x - ix as f64);
    let top = grid[[iy, ix]] * (1.0 - fx) + grid[[iy, ix1]] * fx;
    let bottom = grid[[iy1, ix]] * (1.0 - fx) + grid[[iy1, ix1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn render(src: &Array2<f32>, geo: &Geometry, out: [usize; 2]) -> Array2<f32> {
    let [ho, wo] = out;
    let (hof, wof) = (ho as f64, wo as f64);
    let (sin, cos) = geo.angle.sin_cos();
    let mut view = Array2::from_shape_fn((ho, wo), |(yo, xo)| {
        let mut oy = yo as f64 + 0.5;
        let mut ox = xo as f64 + 0.5;
        if geo.angle != 0.0 {
            let (dy, dx) = (oy - hof / 2.0, ox - wof / 2.0);
            oy = hof / 2.0 + cos * dy - sin * dx;
            ox = wof / 2.0 + sin * dy + cos * dx;
        }
        if let Some((gy, gx)) = &geo.displacement {
            let (u, v) = (yo as f64 / (hof - 1.0), xo as f64 / (wof - 1.0));
            oy += upsample_at(gy, u, v);
            ox += upsample_at(gx, u, v);
        }
        let sy = geo.y0 + oy * geo.ch / hof - 0.5;
        let sx = geo.x0 + ox * geo.cw / wof - 0.5;
        bilinear(src, sy, sx)
    });
    if geo.flip {
        view.invert_axis(ndarray::Axis(1));
        view = view.as_standard_layout().into_owned();
    }
    view
}

fn jitter_intensity<R: Rng + ?Sized>(pixels: &mut Array2<f32>, jitter: f64, rng: &mut R) {
    let zg: f64 = StandardNormal.sample(rng);
    let zs: f64 = StandardNormal.sample(rng);
    let gain = 1.0 + jitter * zg;
    let shift = jitter * zs;
    if gain != 1.0 || shift != 0.0 {
        pixels.mapv_inplace(|p| (p as f64 * gain + shift) as f32);
    }
}

fn make_view(slice: &SliceRecord, pixels: Array2<f32>, view_id: u8) -> SliceView {
    SliceView {
        pixels,
        subject_id: slice.subject_id.clone(),
        slice_index: slice.slice_index,
        num_slices: slice.num_slices,
        view_id,
    }
}

/// Renders a single view.
pub fn augment_view<R: Rng + ?Sized>(
    slice: &SliceRecord,
    cfg: &AugmentConfig,
    rng: &mut R,
    view_id: u8,
) -> Result<SliceView> {
    let geo = sample_geometry(slice.pixels.dim(), cfg, rng)?;
    let mut pixels = render(&slice.pixels, &geo, cfg.output_size);
    jitter_intensity(&mut pixels, cfg.intensity_jitter, rng);
    Ok(make_view(slice, pixels, view_id))
}

/// Two independent augmentations of one slice (views 0 and 1).
pub fn two_views<R: Rng + ?Sized>(
    slice: &SliceRecord,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(SliceView, SliceView)> {
    cfg.validate()?;
    if !cfg.shared_geometry {
        let a = augment_view(slice, cfg, rng, 0)?;
        let b = augment_view(slice, cfg, rng, 1)?;
        return Ok((a, b));
    }
    let geo = sample_geometry(slice.pixels.dim(), cfg, rng)?;
    let mut pa = render(&slice.pixels, &geo, cfg.output_size);
    let mut pb = pa.clone();
    jitter_intensity(&mut pa, cfg.intensity_jitter, rng);
    jitter_intensity(&mut pb, cfg.intensity_jitter, rng);
    Ok((make_view(slice, pa, 0), make_view(slice, pb, 1)))
}
