use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::align::{directed_alignment_grad, windowed_alignment, ComplexityReport, LaAxis};
use super::embed::{normalize_embed_backward, normalize_embed_cached, EmbedParams};
use super::positional::{global_positional_grad, global_positional_loss, GlobalFeature};
use super::LossConfig;
use crate::error::{Error, Result};
use crate::pairing::PairPlan;

/// Encoder outputs for every view of a plan.
#[derive(Debug, Clone)]
pub struct ViewOutputs {
    /// Scale-`s` feature map of each view, `(c, h, w)`.
    pub fmaps: Vec<Array3<f64>>,
    pub globals: Vec<GlobalFeature>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub gp_term: f64,
    /// Mean alignment loss over `P^A`, before weighting by λ. Zero when
    /// `P^A` is empty or λ = 0.
    pub la_term: f64,
    pub num_la_pairs: usize,
    pub complexity: ComplexityReport,
}

/// Gradients of the overall loss.
#[derive(Debug, Clone)]
pub struct OverallGrad {
    pub fmaps: Vec<Array3<f64>>,
    pub globals: Vec<Array1<f64>>,
    pub embed: EmbedParams,
}

fn check_outputs(plan: &PairPlan, outputs: &ViewOutputs) -> Result<()> {
    let n = plan.views.len();
    if outputs.fmaps.len() != n || outputs.globals.len() != n {
        return Err(Error::Shape(format!(
            "{n} views but {} feature maps and {} global features",
            outputs.fmaps.len(),
            outputs.globals.len()
        )));
    }
    Ok(())
}

fn la_enabled(plan: &PairPlan, cfg: &LossConfig) -> bool {
    cfg.lambda != 0.0 && !plan.la_pairs.is_empty()
}

fn combine(gp: f64, la: f64, pairs: usize, cfg: &LossConfig, c: ComplexityReport) -> LossBreakdown {
    let total = if cfg.lambda == 0.0 { gp } else { gp + cfg.lambda * la };
    LossBreakdown {
        total,
        gp_term: gp,
        la_term: la,
        num_la_pairs: pairs,
        complexity: c,
    }
}

/// `GP + λ · mean over P^A of the windowed alignment loss`.
///
/// With `la_symmetric` each pair contributes the average of both query
/// directions; otherwise the direction follows `la_axis`.
pub fn overall_loss(
    plan: &PairPlan,
    outputs: &ViewOutputs,
    embed: &EmbedParams,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_outputs(plan, outputs)?;
    let gp = global_positional_loss(&outputs.globals, &plan.gp_positives, cfg.tau)?;
    if !la_enabled(plan, cfg) {
        return Ok(combine(gp, 0.0, plan.la_pairs.len(), cfg, ComplexityReport::default()));
    }
    let embeddings = outputs
        .fmaps
        .iter()
        .map(|f| normalize_embed_cached(f.view(), embed).map(|(x, _)| x))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut report = ComplexityReport::default();
    for &(i, j) in &plan.la_pairs {
        let (xi, xj) = (&embeddings[i], &embeddings[j]);
        let value = if cfg.la_symmetric {
            let (a, ra) = windowed_alignment(xi, xj, cfg.omega)?;
            let (b, rb) = windowed_alignment(xj, xi, cfg.omega)?;
            report = report.merge(ra).merge(rb);
            0.5 * (a + b)
        } else {
            let (q, k) = match cfg.la_axis {
                LaAxis::Row => (xi, xj),
                LaAxis::Column => (xj, xi),
            };
            let (a, r) = windowed_alignment(q, k, cfg.omega)?;
            report = report.merge(r);
            a
        };
        sum += value;
    }
    let la = sum / plan.la_pairs.len() as f64;
    Ok(combine(gp, la, plan.la_pairs.len(), cfg, report))
}

/// [`overall_loss`] together with gradients with respect to every feature
/// map, every global feature and the embedding parameters.
pub fn overall_loss_grad(
    plan: &PairPlan,
    outputs: &ViewOutputs,
    embed: &EmbedParams,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OverallGrad)> {
    check_outputs(plan, outputs)?;
    let (gp, grad_globals) =
        global_positional_grad(&outputs.globals, &plan.gp_positives, cfg.tau)?;
    let mut grad_fmaps: Vec<Array3<f64>> = outputs
        .fmaps
        .iter()
        .map(|f| Array3::zeros(f.raw_dim()))
        .collect();
    let mut grad_embed = embed.zeros_like();
    if !la_enabled(plan, cfg) {
        let breakdown = combine(gp, 0.0, plan.la_pairs.len(), cfg, ComplexityReport::default());
        return Ok((
            breakdown,
            OverallGrad {
                fmaps: grad_fmaps,
                globals: grad_globals,
                embed: grad_embed,
            },
        ));
    }

    let cached = outputs
        .fmaps
        .iter()
        .map(|f| normalize_embed_cached(f.view(), embed))
        .collect::<Result<Vec<_>>>()?;
    let mut grad_x: Vec<Option<Array2<f64>>> = vec![None; cached.len()];
    let mut accumulate = |k: usize, g: &Array2<f64>, scale: f64| match &mut grad_x[k] {
        Some(acc) => acc.scaled_add(scale, g),
        slot @ None => *slot = Some(g * scale),
    };

    let weight = cfg.lambda / plan.la_pairs.len() as f64;
    let mut sum = 0.0;
    let mut report = ComplexityReport::default();
    for &(i, j) in &plan.la_pairs {
        let (xi, xj) = (&cached[i].0, &cached[j].0);
        if cfg.la_symmetric {
            let a = directed_alignment_grad(xi, xj, cfg.omega, LaAxis::Row)?;
            let b = directed_alignment_grad(xi, xj, cfg.omega, LaAxis::Column)?;
            sum += 0.5 * (a.loss + b.loss);
            report = report.merge(a.report).merge(b.report);
            accumulate(i, &a.grad_i, 0.5 * weight);
            accumulate(j, &a.grad_j, 0.5 * weight);
            accumulate(i, &b.grad_i, 0.5 * weight);
            accumulate(j, &b.grad_j, 0.5 * weight);
        } else {
            let a = directed_alignment_grad(xi, xj, cfg.omega, cfg.la_axis)?;
            sum += a.loss;
            report = report.merge(a.report);
            accumulate(i, &a.grad_i, weight);
            accumulate(j, &a.grad_j, weight);
        }
    }
    let la = sum / plan.la_pairs.len() as f64;

    for (k, g) in grad_x.into_iter().enumerate() {
        if let Some(g) = g {
            let (gf, ge) = normalize_embed_backward(&cached[k].1, embed, &g);
            grad_fmaps[k] = gf;
            grad_embed.add_assign(&ge);
        }
    }
    Ok((
        combine(gp, la, plan.la_pairs.len(), cfg, report),
        OverallGrad {
            fmaps: grad_fmaps,
            globals: grad_globals,
            embed: grad_embed,
        },
    ))
}
