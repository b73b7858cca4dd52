//! Local alignment between the pixel embeddings of two nearby slices.
//!
//! For query pixel `k` of the first slice the score is the highest cosine
//! similarity it reaches against the candidate pixels of the second slice;
//! the loss is the mean absolute error of those scores against 1. The full
//! variant scans every pixel; the windowed variant only scans the `ω x ω`
//! window with the same grid index as the query.

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::embed::{normalize_embed_cached, normalize_embed_backward, EmbedParams, PixelEmbedding};
use crate::error::{Error, Result};

/// Work counters of one similarity pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// Multiply-accumulates spent on similarity entries.
    pub mac_count: u64,
    /// Size of the largest similarity buffer materialized at once.
    pub peak_similarity_entries: u64,
}

impl ComplexityReport {
    pub fn merge(self, other: ComplexityReport) -> ComplexityReport {
        ComplexityReport {
            mac_count: self.mac_count + other.mac_count,
            peak_similarity_entries: self.peak_similarity_entries.max(other.peak_similarity_entries),
        }
    }
}

/// Which side of `A = X_iᵀ X_j` supplies the queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaAxis {
    /// Max over each row: pixels of `S_i` look for matches in `S_j`.
    #[default]
    Row,
    /// Max over each column: pixels of `S_j` look for matches in `S_i`.
    Column,
}

/// Pixel indices (row-major over the grid) of every window, windows in
/// row-major order.
pub(crate) fn window_partition(h: usize, w: usize, omega: usize) -> Result<Vec<Vec<usize>>> {
    if omega == 0 || !h.is_multiple_of(omega) || !w.is_multiple_of(omega) {
        return Err(Error::WindowDivisibility { h, w, omega });
    }
    let mut windows = Vec::with_capacity((h / omega) * (w / omega));
    for wy in 0..h / omega {
        for wx in 0..w / omega {
            let mut idx = Vec::with_capacity(omega * omega);
            for dy in 0..omega {
                for dx in 0..omega {
                    idx.push((wy * omega + dy) * w + wx * omega + dx);
                }
            }
            windows.push(idx);
        }
    }
    Ok(windows)
}

fn full_partition(hw: usize) -> Vec<Vec<usize>> {
    vec![(0..hw).collect()]
}

/// Result of a forward scan: per query pixel, its best match and score.
struct Scan {
    best: Vec<usize>,
    score: Vec<f64>,
    report: ComplexityReport,
}

fn pixel_rows(x: &PixelEmbedding) -> Array2<f64> {
    // (hw, c), so each pixel vector is contiguous.
    x.matrix.t().as_standard_layout().into_owned()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Materializes every window's similarity block at once, then takes row
/// maxima. Ties resolve to the lowest candidate index.
fn scan(xi: &PixelEmbedding, xj: &PixelEmbedding, windows: &[Vec<usize>]) -> Scan {
    let c = xi.channels();
    let hw = xi.num_pixels();
    let qi = pixel_rows(xi);
    let kj = pixel_rows(xj);
    let qi = qi.as_slice().expect("standard layout");
    let kj = kj.as_slice().expect("standard layout");

    let block = |win: &Vec<usize>| win.len() * win.len();
    let total: usize = windows.iter().map(block).sum();
    let mut sims = vec![0.0f64; total];
    let mut mac = 0u64;
    let mut offset = 0;
    for win in windows {
        let n = win.len();
        for (a, &p) in win.iter().enumerate() {
            let q = &qi[p * c..(p + 1) * c];
            for (b, &r) in win.iter().enumerate() {
                sims[offset + a * n + b] = dot(q, &kj[r * c..(r + 1) * c]);
            }
        }
        mac += (n * n * c) as u64;
        offset += n * n;
    }

    let mut best = vec![0usize; hw];
    let mut score = vec![0.0f64; hw];
    let mut offset = 0;
    for win in windows {
        let n = win.len();
        for (a, &p) in win.iter().enumerate() {
            let row = &sims[offset + a * n..offset + (a + 1) * n];
            let mut arg = 0;
            for b in 1..n {
                if row[b] > row[arg] {
                    arg = b;
                }
            }
            best[p] = win[arg];
            score[p] = row[arg];
        }
        offset += n * n;
    }
    Scan {
        best,
        score,
        report: ComplexityReport {
            mac_count: mac,
            peak_similarity_entries: total as u64,
        },
    }
}

fn mae_to_one(scores: &[f64]) -> f64 {
    scores.iter().map(|m| (m - 1.0).abs()).sum::<f64>() / scores.len() as f64
}

fn check_pair(xi: &PixelEmbedding, xj: &PixelEmbedding) -> Result<()> {
    if xi.matrix.dim() != xj.matrix.dim() || xi.grid != xj.grid {
        return Err(Error::Shape(format!(
            "embeddings {:?} (grid {:?}) and {:?} (grid {:?}) differ",
            xi.matrix.dim(),
            xi.grid,
            xj.matrix.dim(),
            xj.grid
        )));
    }
    Ok(())
}

fn partition_for(x: &PixelEmbedding, omega: Option<usize>) -> Result<Vec<Vec<usize>>> {
    match omega {
        None => Ok(full_partition(x.num_pixels())),
        Some(omega) => window_partition(x.grid.0, x.grid.1, omega),
    }
}

/// Full-plane alignment loss between two embeddings (row-wise maxima).
pub fn local_alignment_loss(xi: &PixelEmbedding, xj: &PixelEmbedding) -> Result<f64> {
    local_alignment_with_report(xi, xj).map(|(l, _)| l)
}

pub fn local_alignment_with_report(
    xi: &PixelEmbedding,
    xj: &PixelEmbedding,
) -> Result<(f64, ComplexityReport)> {
    check_pair(xi, xj)?;
    let s = scan(xi, xj, &partition_for(xi, None)?);
    Ok((mae_to_one(&s.score), s.report))
}

/// Windowed alignment loss between two embeddings: every query pixel is
/// matched inside its own `omega x omega` window, and the absolute errors
/// are averaged over all pixels of the grid.
pub fn windowed_alignment(
    xi: &PixelEmbedding,
    xj: &PixelEmbedding,
    omega: usize,
) -> Result<(f64, ComplexityReport)> {
    check_pair(xi, xj)?;
    let s = scan(xi, xj, &partition_for(xi, Some(omega))?);
    Ok((mae_to_one(&s.score), s.report))
}

/// Loss value and gradients with respect to both embedding matrices.
#[derive(Debug, Clone)]
pub struct AlignmentGrad {
    pub loss: f64,
    pub grad_i: Array2<f64>,
    pub grad_j: Array2<f64>,
    pub report: ComplexityReport,
}

fn alignment_grad(
    xi: &PixelEmbedding,
    xj: &PixelEmbedding,
    omega: Option<usize>,
) -> Result<AlignmentGrad> {
    check_pair(xi, xj)?;
    let s = scan(xi, xj, &partition_for(xi, omega)?);
    let hw = xi.num_pixels() as f64;
    let mut grad_i = Array2::zeros(xi.matrix.raw_dim());
    let mut grad_j = Array2::zeros(xj.matrix.raw_dim());
    for (k, (&b, &m)) in s.best.iter().zip(&s.score).enumerate() {
        // d|m - 1|/dm, with 0 at the kink.
        let g = match m.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => -1.0,
            Some(std::cmp::Ordering::Greater) => 1.0,
            _ => 0.0,
        } / hw;
        if g == 0.0 {
            continue;
        }
        let mut gi = grad_i.column_mut(k);
        gi.scaled_add(g, &xj.matrix.column(b));
        let mut gj = grad_j.column_mut(b);
        gj.scaled_add(g, &xi.matrix.column(k));
    }
    Ok(AlignmentGrad {
        loss: mae_to_one(&s.score),
        grad_i,
        grad_j,
        report: s.report,
    })
}

pub fn local_alignment_grad(xi: &PixelEmbedding, xj: &PixelEmbedding) -> Result<AlignmentGrad> {
    alignment_grad(xi, xj, None)
}

pub fn windowed_alignment_grad(
    xi: &PixelEmbedding,
    xj: &PixelEmbedding,
    omega: usize,
) -> Result<AlignmentGrad> {
    alignment_grad(xi, xj, Some(omega))
}

/// Like [`windowed_alignment_grad`] but with the query side chosen by `axis`.
pub fn directed_alignment_grad(
    xi: &PixelEmbedding,
    xj: &PixelEmbedding,
    omega: usize,
    axis: LaAxis,
) -> Result<AlignmentGrad> {
    match axis {
        LaAxis::Row => windowed_alignment_grad(xi, xj, omega),
        LaAxis::Column => {
            let g = windowed_alignment_grad(xj, xi, omega)?;
            Ok(AlignmentGrad {
                loss: g.loss,
                grad_i: g.grad_j,
                grad_j: g.grad_i,
                report: g.report,
            })
        }
    }
}

/// Smallest gap between the best and second-best candidate over all query
/// pixels. Gradients are only well defined when this is positive.
pub fn min_match_margin(xi: &PixelEmbedding, xj: &PixelEmbedding, omega: usize) -> Result<f64> {
    check_pair(xi, xj)?;
    let windows = partition_for(xi, Some(omega))?;
    let mut margin = f64::INFINITY;
    for win in &windows {
        for &p in win {
            let mut top = [f64::NEG_INFINITY; 2];
            for &r in win {
                let s = xi.matrix.column(p).dot(&xj.matrix.column(r));
                if s > top[0] {
                    top = [s, top[0]];
                } else if s > top[1] {
                    top[1] = s;
                }
            }
            if win.len() > 1 {
                margin = margin.min(top[0] - top[1]);
            }
        }
    }
    Ok(margin)
}

/// Windowed alignment loss straight from two `c x h x w` feature maps.
pub fn windowed_local_alignment_loss(
    fmap_i: ArrayView3<f64>,
    fmap_j: ArrayView3<f64>,
    embed: &EmbedParams,
    omega: usize,
) -> Result<(f64, ComplexityReport)> {
    let (_, h, w) = fmap_i.dim();
    if fmap_i.dim() != fmap_j.dim() {
        return Err(Error::Shape(format!(
            "feature maps {:?} and {:?} differ",
            fmap_i.dim(),
            fmap_j.dim()
        )));
    }
    if omega == 0 || h % omega != 0 || w % omega != 0 {
        return Err(Error::WindowDivisibility { h, w, omega });
    }
    let (xi, _) = normalize_embed_cached(fmap_i, embed)?;
    let (xj, _) = normalize_embed_cached(fmap_j, embed)?;
    windowed_alignment(&xi, &xj, omega)
}

/// Gradients of [`windowed_local_alignment_loss`] with respect to both maps
/// and the embedding parameters.
#[derive(Debug, Clone)]
pub struct FeatureAlignmentGrad {
    pub loss: f64,
    pub grad_fmap_i: ndarray::Array3<f64>,
    pub grad_fmap_j: ndarray::Array3<f64>,
    pub grad_embed: EmbedParams,
    pub report: ComplexityReport,
}

pub fn windowed_local_alignment_grad(
    fmap_i: ArrayView3<f64>,
    fmap_j: ArrayView3<f64>,
    embed: &EmbedParams,
    omega: usize,
) -> Result<FeatureAlignmentGrad> {
    let (xi, ci) = normalize_embed_cached(fmap_i, embed)?;
    let (xj, cj) = normalize_embed_cached(fmap_j, embed)?;
    let g = windowed_alignment_grad(&xi, &xj, omega)?;
    let (grad_fmap_i, mut grad_embed) = normalize_embed_backward(&ci, embed, &g.grad_i);
    let (grad_fmap_j, ge) = normalize_embed_backward(&cj, embed, &g.grad_j);
    grad_embed.add_assign(&ge);
    Ok(FeatureAlignmentGrad {
        loss: g.loss,
        grad_fmap_i,
        grad_fmap_j,
        grad_embed,
        report: g.report,
    })
}
