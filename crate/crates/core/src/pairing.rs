//! Batch construction and positive-set rules.
//!
//! Two rules coexist. The positional (global) rule treats views as positive
//! when their relative slice positions differ by less than `t`, across
//! subjects. The alignment rule pairs views of the same volume whose slice
//! indices differ by less than `t·V`. Twin views of one slice satisfy both.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{two_views, AugmentConfig, SliceView};
use crate::data::UnlabeledVolume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    /// Position threshold in `(0, 1]`.
    pub t: f64,
    /// Slices per iteration; each yields two views.
    pub n: usize,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig { t: 0.1, n: 8 }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::Config(format!("pairing.t = {} outside (0, 1]", self.t)));
        }
        if self.n < 2 || !self.n.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "pairing.n = {} must be even and at least 2",
                self.n
            )));
        }
        Ok(())
    }
}

/// `slice_index / V`.
pub fn relative_position(slice_index: usize, num_slices: usize) -> Result<f64> {
    if num_slices == 0 {
        return Err(Error::InvalidArgument("volume with 0 slices".into()));
    }
    if slice_index >= num_slices {
        return Err(Error::SliceOutOfRange {
            index: slice_index,
            depth: num_slices,
        });
    }
    Ok(slice_index as f64 / num_slices as f64)
}

fn position(v: &SliceView) -> f64 {
    v.slice_index as f64 / v.num_slices as f64
}

pub fn is_twin(a: &SliceView, b: &SliceView) -> bool {
    a.subject_id == b.subject_id && a.slice_index == b.slice_index && a.view_id != b.view_id
}

/// `P_i` for every view: `j ≠ i` is positive when it is `i`'s twin or the
/// relative positions differ by less than `t`.
pub fn gp_positive_set(views: &[SliceView], t: f64) -> Vec<Vec<usize>> {
    views
        .iter()
        .enumerate()
        .map(|(i, a)| {
            views
                .iter()
                .enumerate()
                .filter(|&(j, b)| {
                    j != i && (is_twin(a, b) || (position(a) - position(b)).abs() < t)
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

/// `P^A`: unordered pairs `(i, j)`, `i < j`, from the same subject with
/// `|slice_i - slice_j| < t·V`.
pub fn la_positive_pairs(views: &[SliceView], t: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, a) in views.iter().enumerate() {
        for (j, b) in views.iter().enumerate().skip(i + 1) {
            if a.subject_id != b.subject_id {
                continue;
            }
            let gap = a.slice_index.abs_diff(b.slice_index) as f64;
            if gap < t * a.num_slices as f64 {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Views of one iteration plus both positive structures.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPlan {
    pub views: Vec<SliceView>,
    pub gp_positives: Vec<Vec<usize>>,
    pub la_pairs: Vec<(usize, usize)>,
}

impl PairPlan {
    pub fn from_views(views: Vec<SliceView>, t: f64) -> Self {
        let gp_positives = gp_positive_set(&views, t);
        let la_pairs = la_positive_pairs(&views, t);
        PairPlan {
            views,
            gp_positives,
            la_pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Checks irreflexivity, symmetry, the twin rule, the alignment-pair
    /// conditions and that every alignment pair is also positionally
    /// positive.
    pub fn check_invariants(&self, t: f64) -> Result<()> {
        let n = self.views.len();
        let fail = |m: String| Err(Error::InvalidArgument(format!("pair plan: {m}")));
        if self.gp_positives.len() != n {
            return fail(format!("{} positive sets for {n} views", self.gp_positives.len()));
        }
        for (i, set) in self.gp_positives.iter().enumerate() {
            if set.contains(&i) {
                return fail(format!("view {i} is its own positive"));
            }
            for &j in set {
                if j >= n || !self.gp_positives[j].contains(&i) {
                    return fail(format!("positive relation {i} -> {j} is not symmetric"));
                }
            }
            for (j, other) in self.views.iter().enumerate() {
                if j != i && is_twin(&self.views[i], other) && !set.contains(&j) {
                    return fail(format!("twin {j} of view {i} missing from its positives"));
                }
            }
        }
        for &(i, j) in &self.la_pairs {
            if i >= j || j >= n {
                return fail(format!("alignment pair ({i}, {j}) not ordered"));
            }
            let (a, b) = (&self.views[i], &self.views[j]);
            if a.subject_id != b.subject_id {
                return fail(format!("alignment pair ({i}, {j}) spans subjects"));
            }
            let gap = a.slice_index.abs_diff(b.slice_index) as f64;
            if !(gap < t * a.num_slices as f64) {
                return fail(format!("alignment pair ({i}, {j}) too far apart"));
            }
            if !self.gp_positives[i].contains(&j) {
                return fail(format!("alignment pair ({i}, {j}) is not positionally positive"));
            }
        }
        Ok(())
    }
}

/// Samples two distinct subjects, `n/2` distinct slices of each, and two
/// views per slice. Views of one slice are adjacent (`2k`, `2k+1`).
///
/// Each slice is augmented with its own generator seeded from `rng`, so
/// views do not depend on how the augmentation work is scheduled.
pub fn sample_pretrain_batch<R: Rng + ?Sized>(
    volumes: &[UnlabeledVolume<'_>],
    cfg: &PairingConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<PairPlan> {
    cfg.validate()?;
    if volumes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pre-training batches need at least 2 subjects, got {}",
            volumes.len()
        )));
    }
    let per_subject = cfg.n / 2;
    let subjects = index::sample(rng, volumes.len(), 2).into_vec();
    let mut jobs = Vec::with_capacity(cfg.n);
    for &s in &subjects {
        let vol = &volumes[s];
        if vol.num_slices() < per_subject {
            return Err(Error::InvalidArgument(format!(
                "subject {} has {} slices, batch needs {per_subject}",
                vol.subject_id,
                vol.num_slices()
            )));
        }
        for z in index::sample(rng, vol.num_slices(), per_subject) {
            jobs.push((s, z, rng.random::<u64>()));
        }
    }
    let mut views = Vec::with_capacity(2 * cfg.n);
    for (s, z, seed) in jobs {
        let slice = volumes[s].slice(z)?;
        let mut view_rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = two_views(&slice, aug, &mut view_rng)?;
        views.push(a);
        views.push(b);
    }
    let plan = PairPlan::from_views(views, cfg.t);
    plan.check_invariants(cfg.t)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn view(subject: &str, z: usize, v: usize, id: u8) -> SliceView {
        SliceView {
            pixels: Array2::zeros((8, 8)),
            subject_id: subject.into(),
            slice_index: z,
            num_slices: v,
            view_id: id,
        }
    }

    #[test]
    fn relative_positions() {
        assert_eq!(relative_position(0, 10).unwrap(), 0.0);
        assert_eq!(relative_position(5, 10).unwrap(), 0.5);
        assert_eq!(relative_position(19, 20).unwrap(), 0.95);
        assert!(relative_position(0, 0).is_err());
    }

    #[test]
    fn twins_only() {
        let p = gp_positive_set(&[view("a", 3, 10, 0), view("a", 3, 10, 1)], 0.1);
        assert_eq!(p, vec![vec![1], vec![0]]);
    }

    #[test]
    fn cross_subject_position_rule() {
        // 0.10 vs 0.12
        let near = [view("a", 10, 100, 0), view("b", 12, 100, 0)];
        assert_eq!(gp_positive_set(&near, 0.1), vec![vec![1], vec![0]]);
        // 0.10 vs 0.30
        let far = [view("a", 10, 100, 0), view("b", 30, 100, 0)];
        assert!(gp_positive_set(&far, 0.1).iter().all(Vec::is_empty));
        // Different subjects never form alignment pairs.
        assert!(la_positive_pairs(&near, 0.1).is_empty());
        let same_pos = [view("a", 5, 20, 0), view("b", 5, 20, 0)];
        assert!(la_positive_pairs(&same_pos, 0.1).is_empty());
        assert_eq!(gp_positive_set(&same_pos, 0.1), vec![vec![1], vec![0]]);
    }

    #[test]
    fn alignment_threshold_is_strict() {
        let v = [view("a", 2, 20, 0), view("a", 3, 20, 0), view("a", 4, 20, 0)];
        let pairs = la_positive_pairs(&v, 0.1);
        assert!(pairs.contains(&(0, 1)));
        assert!(!pairs.contains(&(0, 2)));
        // twins at distance 0
        let t = [view("a", 7, 20, 0), view("a", 7, 20, 1)];
        assert_eq!(la_positive_pairs(&t, 0.1), vec![(0, 1)]);
    }

    #[test]
    fn config_validation() {
        assert!(PairingConfig { t: 0.0, n: 4 }.validate().is_err());
        assert!(PairingConfig { t: 0.1, n: 3 }.validate().is_err());
        assert!(PairingConfig { t: 1.0, n: 2 }.validate().is_ok());
    }

    proptest! {
        #[test]
        fn alignment_pairs_are_positional_positives(
            idx in prop::collection::vec((0usize..3, 0usize..64, 0u8..2), 2..24),
            depth in 8usize..64,
            t in 0.01f64..1.0,
        ) {
            let views: Vec<SliceView> = idx
                .iter()
                .map(|&(s, z, id)| view(&format!("s{s}"), z % depth, depth, id))
                .collect();
            let plan = PairPlan::from_views(views, t);
            for &(i, j) in &plan.la_pairs {
                prop_assert!(plan.gp_positives[i].contains(&j));
            }
            for (i, set) in plan.gp_positives.iter().enumerate() {
                prop_assert!(!set.contains(&i));
                for &j in set {
                    prop_assert!(plan.gp_positives[j].contains(&i));
                }
            }
        }
    }
}
