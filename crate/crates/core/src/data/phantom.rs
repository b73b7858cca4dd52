//! Synthetic cardiac-like phantoms.
//!
//! Each subject holds a bright inner ellipsoid (class 1) wrapped in a thicker
//! shell (class 2), a separate ellipsoid beside them (class 3) and, for about
//! half the subjects, an unlabeled distractor blob of similar brightness. All
//! of it sits inside an elliptic "body" cylinder, under a smooth linear bias
//! field and additive Gaussian noise.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Volume, MIN_PLANE};
use crate::error::{Error, Result};

/// Background plus three labeled structures.
pub const PHANTOM_NUM_CLASSES: usize = 4;

const NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        let dx = (x - self.center[2]) / self.radii[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn make_subject(index: usize, v: usize, h: usize, w: usize, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (vf, hf, wf) = (v as f64, h as f64, w as f64);

    let inner = Ellipsoid {
        center: [
            vf * uniform(&mut rng, 0.45, 0.55),
            hf * uniform(&mut rng, 0.42, 0.55),
            wf * uniform(&mut rng, 0.33, 0.42),
        ],
        radii: [
            vf * uniform(&mut rng, 0.32, 0.40),
            hf * uniform(&mut rng, 0.09, 0.12),
            wf * uniform(&mut rng, 0.09, 0.12),
        ],
    };
    let shell_y = hf * uniform(&mut rng, 0.05, 0.07);
    let shell_x = wf * uniform(&mut rng, 0.05, 0.07);
    let outer = Ellipsoid {
        center: inner.center,
        radii: [
            inner.radii[0] * uniform(&mut rng, 1.05, 1.15),
            inner.radii[1] + shell_y,
            inner.radii[2] + shell_x,
        ],
    };
    let side_rx = wf * uniform(&mut rng, 0.08, 0.11);
    let side = Ellipsoid {
        center: [
            inner.center[0] + vf * uniform(&mut rng, -0.05, 0.05),
            inner.center[1] + hf * uniform(&mut rng, -0.05, 0.05),
            outer.center[2] + outer.radii[2] + side_rx + wf * uniform(&mut rng, 0.01, 0.03),
        ],
        radii: [
            vf * uniform(&mut rng, 0.30, 0.38),
            hf * uniform(&mut rng, 0.09, 0.13),
            side_rx,
        ],
    };
    let distractor = rng.random_bool(0.5).then(|| Ellipsoid {
        center: [
            vf * uniform(&mut rng, 0.35, 0.65),
            hf * uniform(&mut rng, 0.82, 0.87),
            wf * uniform(&mut rng, 0.25, 0.45),
        ],
        radii: [
            vf * uniform(&mut rng, 0.15, 0.25),
            hf * uniform(&mut rng, 0.04, 0.06),
            wf * uniform(&mut rng, 0.05, 0.08),
        ],
    });

    let jitter = |rng: &mut ChaCha8Rng, base: f64| base + uniform(rng, -0.05, 0.05);
    let body_level = jitter(&mut rng, 0.30);
    let inner_level = jitter(&mut rng, 1.00);
    let shell_level = jitter(&mut rng, 0.55);
    let side_level = jitter(&mut rng, 0.85);
    let distractor_level = jitter(&mut rng, 0.95);
    let bias = [
        uniform(&mut rng, -0.2, 0.2),
        uniform(&mut rng, -0.2, 0.2),
        uniform(&mut rng, -0.2, 0.2),
    ];
    let body = [hf * 0.46, wf * 0.47];
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");

    let mut voxels = Array3::<f32>::zeros((v, h, w));
    let mut labels = Array3::<u8>::zeros((v, h, w));
    for zi in 0..v {
        let z = zi as f64 + 0.5;
        for yi in 0..h {
            let y = yi as f64 + 0.5;
            for xi in 0..w {
                let x = xi as f64 + 0.5;
                let (label, level) = if inner.contains(z, y, x) {
                    (1, inner_level)
                } else if outer.contains(z, y, x) {
                    (2, shell_level)
                } else if side.contains(z, y, x) {
                    (3, side_level)
                } else if distractor.is_some_and(|d| d.contains(z, y, x)) {
                    (0, distractor_level)
                } else {
                    let by = (y - hf / 2.0) / body[0];
                    let bx = (x - wf / 2.0) / body[1];
                    (0, if by * by + bx * bx <= 1.0 { body_level } else { 0.0 })
                };
                let field = 1.0
                    + bias[0] * (z / vf - 0.5)
                    + bias[1] * (y / hf - 0.5)
                    + bias[2] * (x / wf - 0.5);
                voxels[[zi, yi, xi]] = (level * field + noise.sample(&mut rng)) as f32;
                labels[[zi, yi, xi]] = label;
            }
        }
    }
    Volume {
        subject_id: format!("phantom{index:03}"),
        voxels,
        spacing: Some([1.0, 1.0, 1.0]),
        labels: Some(labels),
    }
}

/// Generates `num_subjects` labeled phantom volumes of shape `(V, H, W)`.
///
/// Output is a pure function of the arguments. Intensities are left
/// unnormalized; [`phantom_dataset`] z-scores them the way loaders do.
pub fn make_phantom_dataset(
    num_subjects: usize,
    v: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<Volume>> {
    if num_subjects < 2 {
        return Err(Error::InvalidArgument(format!(
            "phantom dataset needs at least 2 subjects, got {num_subjects}"
        )));
    }
    if v < MIN_PLANE || h < MIN_PLANE || w < MIN_PLANE {
        return Err(Error::InvalidArgument(format!(
            "phantom dimensions {v}x{h}x{w} must all be at least {MIN_PLANE}"
        )));
    }
    Ok((0..num_subjects)
        .map(|i| make_subject(i, v, h, w, seed))
        .collect())
}

/// Phantom volumes, normalized, wrapped in a [`Dataset`].
pub fn phantom_dataset(
    num_subjects: usize,
    v: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Dataset> {
    let volumes = make_phantom_dataset(num_subjects, v, h, w, seed)?
        .into_iter()
        .map(Volume::normalized)
        .collect();
    Dataset::new(volumes, PHANTOM_NUM_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn slice_dice(a: &ndarray::ArrayView2<u8>, b: &ndarray::ArrayView2<u8>, class: u8) -> f64 {
        let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.iter().zip(b.iter()) {
            let (px, py) = (x == class, y == class);
            inter += (px && py) as usize;
            na += px as usize;
            nb += py as usize;
        }
        2.0 * inter as f64 / (na + nb) as f64
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_phantom_dataset(3, 12, 32, 32, 7).unwrap();
        let b = make_phantom_dataset(3, 12, 32, 32, 7).unwrap();
        assert_eq!(a, b);
        let c = make_phantom_dataset(3, 12, 32, 32, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn preconditions() {
        assert!(make_phantom_dataset(1, 12, 32, 32, 0).is_err());
        assert!(make_phantom_dataset(2, 12, 7, 32, 0).is_err());
    }

    #[test]
    fn classes_are_z_contiguous_and_present() {
        for vol in make_phantom_dataset(20, 24, 64, 64, 7).unwrap() {
            let labels = vol.labels.as_ref().unwrap();
            for class in 1..PHANTOM_NUM_CLASSES as u8 {
                let present: Vec<bool> = labels
                    .axis_iter(Axis(0))
                    .map(|s| s.iter().any(|&l| l == class))
                    .collect();
                let first = present.iter().position(|&p| p).expect("class present");
                let last = present.iter().rposition(|&p| p).unwrap();
                assert!(
                    present[first..=last].iter().all(|&p| p),
                    "{} class {class} not contiguous: {present:?}",
                    vol.subject_id
                );
            }
        }
    }

    #[test]
    fn adjacent_slices_overlap() {
        let (mut good, mut total) = (0usize, 0usize);
        let mut sum = 0.0;
        for vol in make_phantom_dataset(20, 24, 64, 64, 7).unwrap() {
            let labels = vol.labels.as_ref().unwrap();
            for class in 1..PHANTOM_NUM_CLASSES as u8 {
                let present: Vec<usize> = labels
                    .axis_iter(Axis(0))
                    .enumerate()
                    .filter(|(_, s)| s.iter().any(|&l| l == class))
                    .map(|(z, _)| z)
                    .collect();
                let (lo, hi) = (present[0], *present.last().unwrap());
                // Interior pairs: both slices strictly inside the range.
                for z in lo + 1..hi.saturating_sub(1) {
                    let d = slice_dice(
                        &labels.index_axis(Axis(0), z),
                        &labels.index_axis(Axis(0), z + 1),
                        class,
                    );
                    total += 1;
                    sum += d;
                    good += (d >= 0.5) as usize;
                }
            }
        }
        let frac = good as f64 / total as f64;
        assert!(frac >= 0.95, "only {frac:.3} of adjacent pairs reach Dice 0.5");
        assert!(sum / total as f64 >= 0.5);
    }

    #[test]
    fn dataset_wrapper_normalizes() {
        let ds = phantom_dataset(2, 8, 16, 16, 1).unwrap();
        assert_eq!(ds.num_classes(), PHANTOM_NUM_CLASSES);
        let vox = ds.voxels(0);
        let mean = vox.iter().map(|&x| x as f64).sum::<f64>() / vox.len() as f64;
        assert!(mean.abs() < 1e-4);
    }
}
