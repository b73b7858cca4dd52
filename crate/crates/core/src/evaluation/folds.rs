use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::rng_stream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// The `M` training subjects whose labels are used.
    pub labeled: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub m: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Validation sets partition the subjects, each train set is the
    /// complement of its validation set, and labeled subsets lie inside the
    /// train sets.
    pub fn check(&self, subjects: &[String]) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(format!("fold plan: {m}")));
        let mut seen: Vec<&String> = self.folds.iter().flat_map(|f| &f.val).collect();
        seen.sort();
        let mut all: Vec<&String> = subjects.iter().collect();
        all.sort();
        if seen != all {
            return fail("validation sets do not partition the subjects".into());
        }
        for f in &self.folds {
            if f.train.len() + f.val.len() != subjects.len()
                || f.train.iter().any(|s| f.val.contains(s))
            {
                return fail(format!("fold {} train/val split is inconsistent", f.index));
            }
            if f.labeled.len() != self.m || f.labeled.iter().any(|s| !f.train.contains(s)) {
                return fail(format!("fold {} labeled subset is invalid", f.index));
            }
        }
        Ok(())
    }
}

/// Deterministic `k`-fold split with an `M`-subject labeled subset per fold.
/// The subsets depend only on `(subjects, k, M, seed)`, so every method run
/// with the same seed trains on the same subjects.
pub fn make_folds(subjects: &[String], k: usize, m: usize, seed: u64) -> Result<FoldPlan> {
    let n = subjects.len();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} folds for {n} subjects")));
    }
    let min_train = n - n.div_ceil(k);
    if m == 0 || m > min_train {
        return Err(Error::InvalidArgument(format!(
            "M = {m} labeled subjects but the smallest training split has {min_train}"
        )));
    }
    let mut order = subjects.to_vec();
    order.shuffle(&mut rng_stream(seed, 0));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let val: Vec<String> = order[start..start + size].to_vec();
        let train: Vec<String> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .cloned()
            .collect();
        let labeled = index::sample(&mut rng_stream(seed, 1 + f as u64), train.len(), m)
            .into_iter()
            .map(|i| train[i].clone())
            .collect();
        folds.push(Fold {
            index: f,
            train,
            val,
            labeled,
        });
        start += size;
    }
    let plan = FoldPlan { k, m, seed, folds };
    plan.check(subjects)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn ten_subjects_five_folds() {
        let plan = make_folds(&ids(10), 5, 3, 1).unwrap();
        for f in &plan.folds {
            assert_eq!((f.val.len(), f.train.len(), f.labeled.len()), (2, 8, 3));
        }
        assert_eq!(plan, make_folds(&ids(10), 5, 3, 1).unwrap());
        assert_ne!(plan, make_folds(&ids(10), 5, 3, 2).unwrap());
    }

    #[test]
    fn uneven_split_and_errors() {
        let plan = make_folds(&ids(11), 5, 8, 0).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.val.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        assert!(make_folds(&ids(11), 5, 9, 0).is_err());
        assert!(make_folds(&ids(4), 5, 1, 0).is_err());
        assert!(make_folds(&ids(10), 5, 0, 0).is_err());
    }
}
