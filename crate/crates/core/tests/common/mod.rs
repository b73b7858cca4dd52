//! Reference implementations used only by tests. None of this calls into the
//! loss code it is compared against.
#![allow(dead_code)]

pub mod gradcheck;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array3::from_shape_fn((c, h, w), |_| normal.sample(rng))
}

pub fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((r, c), |_| normal.sample(rng))
}

pub fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array1::from_shape_fn(n, |_| normal.sample(rng))
}

/// Embeds and normalizes one pixel with plain loops.
fn oracle_pixel(
    fmap: &Array3<f64>,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
    y: usize,
    x: usize,
) -> Vec<f64> {
    let (c_out, c_in) = weight.dim();
    let mut v = vec![0.0; c_out];
    for o in 0..c_out {
        let mut acc = bias[o];
        for i in 0..c_in {
            acc += weight[[o, i]] * fmap[[i, y, x]];
        }
        v[o] = acc;
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
    v.iter().map(|a| a / norm).collect()
}

/// For every query pixel of `fi`, scans the `omega x omega` window of `fj`
/// containing the same coordinates and takes the best cosine score.
pub fn oracle_window_scan(
    fi: &Array3<f64>,
    fj: &Array3<f64>,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
    omega: usize,
) -> f64 {
    let (_, h, w) = fi.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let q = oracle_pixel(fi, weight, bias, y, x);
            let (wy, wx) = (y / omega * omega, x / omega * omega);
            let mut best = f64::NEG_INFINITY;
            for yy in wy..wy + omega {
                for xx in wx..wx + omega {
                    let k = oracle_pixel(fj, weight, bias, yy, xx);
                    let s: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                    best = best.max(s);
                }
            }
            total += (best - 1.0).abs();
        }
    }
    total / (h * w) as f64
}

/// Positional loss from its definition, one scalar at a time.
pub fn oracle_positional(features: &[Vec<f64>], positives: &[Vec<usize>], tau: f64) -> f64 {
    let cos = |a: &Vec<f64>, b: &Vec<f64>| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let sim = |a: &Vec<f64>, b: &Vec<f64>| (cos(a, b) / tau).exp();
    let n = features.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n)
            .filter(|&q| q != i)
            .map(|q| sim(&features[i], &features[q]))
            .sum();
        let li: f64 = positives[i]
            .iter()
            .map(|&j| -(sim(&features[i], &features[j]) / denom).ln())
            .sum::<f64>()
            / positives[i].len() as f64;
        total += li;
    }
    total / n as f64
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + FD_STEP;
        let plus = f(x);
        x[k] = orig - FD_STEP;
        let minus = f(x);
        x[k] = orig;
        g[k] = (plus - minus) / (2.0 * FD_STEP);
    }
    g
}

/// `|a - n| / max(|a|, |n|)` over the whole gradient vector.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Positive sets and alignment pairs from `(subject, slice, depth)` triples,
/// by direct comparison of every ordered pair.
pub fn oracle_pairs(
    views: &[(String, usize, usize)],
    t: f64,
) -> (Vec<Vec<usize>>, Vec<(usize, usize)>) {
    let n = views.len();
    let mut sets = vec![Vec::new(); n];
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (si, zi, vi) = &views[i];
            let (sj, zj, vj) = &views[j];
            let pi = *zi as f64 / *vi as f64;
            let pj = *zj as f64 / *vj as f64;
            let twin = si == sj && zi == zj;
            if twin || (pi - pj).abs() < t {
                sets[i].push(j);
            }
            let gap = zi.abs_diff(*zj);
            if i < j && si == sj && (gap as f64) < t * *vi as f64 {
                pairs.push((i, j));
            }
        }
    }
    (sets, pairs)
}
