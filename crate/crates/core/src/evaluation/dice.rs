use ndarray::{ArrayBase, Array3, Axis, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegmentationModel;

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice<S1, S2, D>(pred: &ArrayBase<S1, D>, gt: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = bool>,
    S2: Data<Elem = bool>,
    D: Dimension,
{
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    });
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Per-foreground-class Dice of one subject and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDice {
    /// Classes `1..num_classes`.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Dice of every foreground class over the whole label volume.
pub fn mean_dsc(pred: &Array3<u8>, gt: &Array3<u8>, num_classes: usize) -> Result<SubjectDice> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least one foreground class".into()));
    }
    if let Some(&bad) = pred.iter().chain(gt.iter()).find(|&&c| c as usize >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {num_classes})"
        )));
    }
    let per_class = (1..num_classes as u8)
        .map(|c| dice(&pred.mapv(|v| v == c), &gt.mapv(|v| v == c)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(SubjectDice { per_class, mean })
}

pub fn mean_over_subjects(scores: &[SubjectDice]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().map(|s| s.mean).sum::<f64>() / scores.len() as f64
}

/// Slice-wise argmax of the model stacked back into a volume.
pub fn predict_volume(model: &SegmentationModel, voxels: &Array3<f32>) -> Result<Array3<u8>> {
    let (v, h, w) = voxels.dim();
    let mut out = Array3::zeros((v, h, w));
    for z in 0..v {
        let x = voxels.index_axis(Axis(0), z).to_owned().insert_axis(Axis(0));
        let logits = model.predict(&x)?;
        let mut plane = out.index_axis_mut(Axis(0), z);
        for ((i, j), o) in plane.indexed_iter_mut() {
            let mut best = 0;
            for c in 1..logits.dim().0 {
                if logits[[c, i, j]] > logits[[best, i, j]] {
                    best = c;
                }
            }
            *o = best as u8;
        }
    }
    Ok(out)
}
