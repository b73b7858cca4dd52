//! Pre-training objectives: pixel-level alignment between nearby slices,
//! positional contrast between global slice features, and their weighted
//! sum.
//!
//! Everything here runs in `f64` and returns analytic gradients next to the
//! values, so the training loop can hand them to the network and the tests
//! can compare them against finite differences.

mod align;
mod embed;
mod overall;
mod positional;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use align::{
    directed_alignment_grad, local_alignment_grad, local_alignment_loss,
    local_alignment_with_report, min_match_margin, windowed_alignment, windowed_alignment_grad,
    windowed_local_alignment_grad, windowed_local_alignment_loss, AlignmentGrad,
    ComplexityReport, FeatureAlignmentGrad, LaAxis,
};
pub use embed::{
    normalize_embed, normalize_embed_backward, normalize_embed_cached, EmbedCache, EmbedParams,
    PixelEmbedding, NORM_EPS, UNIT_NORM_TOL,
};
pub use overall::{overall_loss, overall_loss_grad, LossBreakdown, OverallGrad, ViewOutputs};
pub use positional::{
    global_positional_grad, global_positional_loss, positional_losses, GlobalFeature,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the alignment term.
    pub lambda: f64,
    /// Window side length on the feature grid.
    pub omega: usize,
    /// Temperature of the positional similarity.
    pub tau: f64,
    /// Encoder scale feeding both losses (1 = full resolution).
    pub s: usize,
    pub la_axis: LaAxis,
    /// Average both query directions of each alignment pair.
    pub la_symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            omega: 4,
            tau: 0.1,
            s: 4,
            la_axis: LaAxis::Row,
            la_symmetric: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss.lambda = {} must be >= 0", self.lambda)));
        }
        if self.omega == 0 {
            return Err(Error::Config("loss.omega must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("loss.tau = {} must be > 0", self.tau)));
        }
        if self.s == 0 {
            return Err(Error::Config("loss.s must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks that a feature grid splits evenly into windows.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(self.omega) || !w.is_multiple_of(self.omega) {
            return Err(Error::WindowDivisibility {
                h,
                w,
                omega: self.omega,
            });
        }
        Ok(())
    }
}
