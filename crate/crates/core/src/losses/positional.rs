//! Positional contrastive loss over the global features of a batch.
//!
//! `Sim(a, b) = exp(cos(a, b) / τ)`. For sample `i` with positive set `P_i`
//! the loss averages `-log(Sim(f_i, f_j) / Σ_{q≠i} Sim(f_i, f_q))` over
//! `j ∈ P_i`; the batch loss is the mean over samples.

use ndarray::Array1;

use crate::error::{Error, Result};

/// Slice-level feature after pooling and projection.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature(pub Array1<f64>);

impl From<Array1<f64>> for GlobalFeature {
    fn from(v: Array1<f64>) -> Self {
        GlobalFeature(v)
    }
}

struct Normalized {
    units: Vec<Array1<f64>>,
    norms: Vec<f64>,
}

fn normalize(features: &[GlobalFeature]) -> Result<Normalized> {
    let mut units = Vec::with_capacity(features.len());
    let mut norms = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        if f.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "global feature {i} has non-finite entries"
            )));
        }
        let norm = f.0.dot(&f.0).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormFeature(i));
        }
        units.push(&f.0 / norm);
        norms.push(norm);
    }
    Ok(Normalized { units, norms })
}

fn validate(features: &[GlobalFeature], positives: &[Vec<usize>], tau: f64) -> Result<()> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "positional loss needs at least 2 samples, got {n}"
        )));
    }
    if positives.len() != n {
        return Err(Error::Shape(format!(
            "{} positive sets for {n} features",
            positives.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let d = features[0].0.len();
    if features.iter().any(|f| f.0.len() != d) {
        return Err(Error::Shape("global features differ in dimension".into()));
    }
    for (i, set) in positives.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::EmptyPositiveSet(i));
        }
        if set.iter().any(|&j| j == i || j >= n) {
            return Err(Error::InvalidArgument(format!(
                "positive set of sample {i} contains an invalid index"
            )));
        }
    }
    Ok(())
}

/// Scaled cosine logits `s_iq = cos(f_i, f_q) / τ`.
fn logits(units: &[Array1<f64>], tau: f64) -> Vec<Vec<f64>> {
    units
        .iter()
        .map(|a| units.iter().map(|b| a.dot(b) / tau).collect())
        .collect()
}

/// `log Σ_{q≠i} exp(s_iq)`, shifted by the row maximum.
fn log_denominator(row: &[f64], i: usize) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(q, _)| q != i)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|&(q, _)| q != i)
        .map(|(_, &s)| (s - max).exp())
        .sum();
    max + sum.ln()
}

/// Per-sample losses `L_i`.
pub fn positional_losses(
    features: &[GlobalFeature],
    positives: &[Vec<usize>],
    tau: f64,
) -> Result<Vec<f64>> {
    validate(features, positives, tau)?;
    let norm = normalize(features)?;
    let s = logits(&norm.units, tau);
    Ok(positives
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let lse = log_denominator(&s[i], i);
            set.iter().map(|&j| lse - s[i][j]).sum::<f64>() / set.len() as f64
        })
        .collect())
}

/// Batch mean of the per-sample positional losses.
pub fn global_positional_loss(
    features: &[GlobalFeature],
    positives: &[Vec<usize>],
    tau: f64,
) -> Result<f64> {
    let losses = positional_losses(features, positives, tau)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Loss and its gradient with respect to every (unnormalized) feature.
pub fn global_positional_grad(
    features: &[GlobalFeature],
    positives: &[Vec<usize>],
    tau: f64,
) -> Result<(f64, Vec<Array1<f64>>)> {
    validate(features, positives, tau)?;
    let norm = normalize(features)?;
    let n = features.len();
    let s = logits(&norm.units, tau);

    let mut total = 0.0;
    // dL/dcos_iq, accumulated over both index roles.
    let mut g = vec![vec![0.0; n]; n];
    for (i, set) in positives.iter().enumerate() {
        let lse = log_denominator(&s[i], i);
        total += set.iter().map(|&j| lse - s[i][j]).sum::<f64>() / set.len() as f64;
        let inv_p = 1.0 / set.len() as f64;
        for q in 0..n {
            if q != i {
                g[i][q] += (s[i][q] - lse).exp() / (n as f64 * tau);
            }
        }
        for &j in set {
            g[i][j] -= inv_p / (n as f64 * tau);
        }
    }
    let loss = total / n as f64;

    let d = features[0].0.len();
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let mut gu = Array1::<f64>::zeros(d);
        for q in 0..n {
            let coeff = g[i][q] + g[q][i];
            if coeff != 0.0 {
                gu.scaled_add(coeff, &norm.units[q]);
            }
        }
        let u = &norm.units[i];
        let proj = u.dot(&gu);
        gu.scaled_add(-proj, u);
        gu /= norm.norms[i];
        grads.push(gu);
    }
    Ok((loss, grads))
}
