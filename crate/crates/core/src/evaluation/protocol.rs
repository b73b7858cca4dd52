use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dice::{mean_dsc, mean_over_subjects, predict_volume};
use super::folds::make_folds;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, SegmentationModel};
use crate::training::{finetune, ExperimentConfig};

/// A way of initializing the encoder before fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct Method<'a> {
    pub name: &'a str,
    /// `None` trains from scratch.
    pub checkpoint: Option<&'a Checkpoint>,
}

impl<'a> Method<'a> {
    pub fn random() -> Self {
        Method {
            name: "random",
            checkpoint: None,
        }
    }

    pub fn pretrained(name: &'a str, checkpoint: &'a Checkpoint) -> Self {
        Method {
            name,
            checkpoint: Some(checkpoint),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub method: String,
    pub m: usize,
    pub fold: usize,
    pub labeled: Vec<String>,
    pub dsc: f64,
    /// Mean over validation subjects of each foreground class.
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub m: usize,
    pub mean: f64,
    /// Population standard deviation over the fold values.
    pub std: f64,
    pub folds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub records: Vec<FoldRecord>,
}

impl ResultTable {
    pub fn row(&self, method: &str, m: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.m == m)
    }

    pub fn to_csv(&self) -> String {
        let k = self.rows.iter().map(|r| r.folds.len()).max().unwrap_or(0);
        let mut out = String::from("method,m,mean_dsc,std");
        for f in 0..k {
            out.push_str(&format!(",fold{f}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6}", r.method, r.m, r.mean, r.std));
            for v in &r.folds {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Fine-tuning seed of fold `fold`; shared by every method.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(1 + fold as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean DSC of `model` over the given subjects, plus the per-class means.
pub fn evaluate_subjects(
    model: &SegmentationModel,
    dataset: &Dataset,
    subjects: &[String],
) -> Result<(f64, Vec<f64>)> {
    let mut scores = Vec::with_capacity(subjects.len());
    for id in subjects {
        let i = dataset
            .index_of(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subject {id:?}")))?;
        let gt = dataset
            .labels(i)
            .ok_or_else(|| Error::InvalidArgument(format!("subject {id:?} has no labels")))?;
        let pred = predict_volume(model, dataset.voxels(i))?;
        scores.push(mean_dsc(&pred, gt, dataset.num_classes())?);
    }
    let classes = dataset.num_classes() - 1;
    let per_class = (0..classes)
        .map(|c| scores.iter().map(|s| s.per_class[c]).sum::<f64>() / scores.len() as f64)
        .collect();
    Ok((mean_over_subjects(&scores), per_class))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// For every method, budget `M` and fold: fine-tune on the fold's labeled
/// subjects and score the validation subjects. Folds run on `cfg.workers`
/// threads; results do not depend on the thread count.
pub fn run_protocol(
    dataset: &Dataset,
    methods: &[Method<'_>],
    ms: &[usize],
    k: usize,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<ResultTable> {
    if methods.is_empty() || ms.is_empty() {
        return Err(Error::InvalidArgument("protocol needs methods and budgets".into()));
    }
    let subjects = dataset.subject_ids();
    let plans = ms
        .iter()
        .map(|&m| make_folds(&subjects, k, m, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for method in methods {
        for plan in &plans {
            for fold in &plan.folds {
                jobs.push((*method, plan.m, fold));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let records: Vec<FoldRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|(method, m, fold)| {
                let mut run_cfg = cfg.clone();
                run_cfg.seed = fold_seed(seed, fold.index);
                let out = finetune(dataset, &fold.labeled, &run_cfg, method.checkpoint)?;
                let (dsc, per_class) = evaluate_subjects(&out.model, dataset, &fold.val)?;
                Ok(FoldRecord {
                    method: method.name.to_string(),
                    m: *m,
                    fold: fold.index,
                    labeled: fold.labeled.clone(),
                    dsc,
                    per_class,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    for method in methods {
        for &m in ms {
            let folds: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method.name && r.m == m)
                .map(|r| r.dsc)
                .collect();
            let (mean, std) = mean_std(&folds);
            rows.push(ResultRow {
                method: method.name.to_string(),
                m,
                mean,
                std,
                folds,
            });
        }
    }
    Ok(ResultTable { rows, records })
}
