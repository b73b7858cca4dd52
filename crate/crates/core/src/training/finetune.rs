use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::optim::Adam;
use super::{rng_stream, STREAM_AUGMENT, STREAM_DATA, STREAM_INIT};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{load_pretrained_encoder, Checkpoint, LoadManifest, SegmentationModel};
use crate::nn::Parameterized;

/// Smoothing of the soft Dice ratio.
const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLoss {
    pub total: f64,
    pub ce: f64,
    /// `1 - mean soft Dice` over the foreground classes.
    pub dice_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub total: f64,
    pub ce: f64,
    pub dice_loss: f64,
}

fn softmax(logits: &Array3<f32>) -> Array3<f64> {
    let mut p = logits.mapv(f64::from);
    for mut px in p.lanes_mut(Axis(0)) {
        let m = px.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        px.mapv_inplace(|v| (v - m).exp());
        let z = px.sum();
        px /= z;
    }
    p
}

/// Equal-weighted pixel-mean cross-entropy plus soft Dice pooled over the
/// batch, with the gradient for every logit map.
pub fn segmentation_loss(
    logits: &[Array3<f32>],
    labels: &[Array2<u8>],
) -> Result<(SegLoss, Vec<Array3<f32>>)> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit maps for {} label maps",
            logits.len(),
            labels.len()
        )));
    }
    let k = logits[0].dim().0;
    let probs: Vec<Array3<f64>> = logits.iter().map(softmax).collect();
    let mut n_pix = 0usize;
    let mut ce = 0.0;
    let (mut inter, mut psum, mut gsum) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for (p, y) in probs.iter().zip(labels) {
        let (kk, h, w) = p.dim();
        if kk != k || y.dim() != (h, w) {
            return Err(Error::Shape(format!("logits {:?} vs labels {:?}", p.dim(), y.dim())));
        }
        n_pix += h * w;
        for ((i, j), &c) in y.indexed_iter() {
            let c = c as usize;
            if c >= k {
                return Err(Error::InvalidArgument(format!("label {c} outside {k} classes")));
            }
            ce -= p[[c, i, j]].max(1e-300).ln();
            inter[c] += p[[c, i, j]];
            gsum[c] += 1.0;
        }
        for c in 0..k {
            psum[c] += p.index_axis(Axis(0), c).sum();
        }
    }
    let n = n_pix as f64;
    ce /= n;
    let fg = (1..k).count().max(1) as f64;
    let mut dice_mean = 0.0;
    // dL/dp for a pixel of class `c` is a[c] + b[c] * [label == c].
    let (mut a, mut b) = (vec![0.0; k], vec![0.0; k]);
    for c in 1..k {
        let den = psum[c] + gsum[c] + DICE_SMOOTH;
        let num = 2.0 * inter[c] + DICE_SMOOTH;
        dice_mean += num / den;
        a[c] = num / (den * den) / fg;
        b[c] = -2.0 / den / fg;
    }
    dice_mean /= fg;
    let dice_loss = if k > 1 { 1.0 - dice_mean } else { 0.0 };
    let grads = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let (_, h, w) = p.dim();
            let mut g = Array3::<f32>::zeros((k, h, w));
            let mut dp = vec![0.0; k];
            for i in 0..h {
                for j in 0..w {
                    let t = y[[i, j]] as usize;
                    let mut dot = 0.0;
                    for c in 0..k {
                        dp[c] = a[c] + if c == t { b[c] } else { 0.0 };
                        dot += p[[c, i, j]] * dp[c];
                    }
                    for c in 0..k {
                        let pc = p[[c, i, j]];
                        let ce_g = (pc - if c == t { 1.0 } else { 0.0 }) / n;
                        g[[c, i, j]] = (ce_g + pc * (dp[c] - dot)) as f32;
                    }
                }
            }
            g
        })
        .collect();
    Ok((
        SegLoss {
            total: ce + dice_loss,
            ce,
            dice_loss,
        },
        grads,
    ))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: SegmentationModel,
    pub log: Vec<FinetuneRecord>,
    /// Present when the encoder came from a checkpoint.
    pub manifest: Option<LoadManifest>,
}

/// Supervised training on the slices of `labeled` subjects only. With
/// `init` the encoder starts from the checkpoint, otherwise everything is
/// random. The initial draws of the decoder are the same either way.
pub fn finetune(
    dataset: &Dataset,
    labeled: &[String],
    cfg: &ExperimentConfig,
    init: Option<&Checkpoint>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("no labeled subjects to fine-tune on".into()));
    }
    let mut slices = Vec::new();
    for id in labeled {
        let i = dataset
            .index_of(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subject {id:?}")))?;
        if !dataset.has_labels(i) {
            return Err(Error::InvalidArgument(format!("subject {id:?} has no labels")));
        }
        let (v, h, w) = dataset.voxels(i).dim();
        cfg.model.grid_at(cfg.model.stages, h, w)?;
        slices.extend((0..v).map(|z| (i, z)));
    }
    let mut init_rng = rng_stream(cfg.seed, STREAM_INIT);
    let mut model = SegmentationModel::new(&cfg.model, dataset.num_classes(), &mut init_rng)?;
    let manifest = match init {
        Some(ckpt) => Some(load_pretrained_encoder(&mut model, ckpt)?),
        None => None,
    };
    let mut adam = Adam::new(&cfg.finetune.optimizer, &model);
    let mut data_rng = rng_stream(cfg.seed, STREAM_DATA);
    let mut aug_rng = rng_stream(cfg.seed, STREAM_AUGMENT);
    let mut log = Vec::with_capacity(cfg.finetune.iterations as usize);
    for step in 0..cfg.finetune.iterations {
        let mut inputs = Vec::with_capacity(cfg.finetune.batch_size);
        let mut targets = Vec::with_capacity(cfg.finetune.batch_size);
        for _ in 0..cfg.finetune.batch_size {
            let (i, z) = slices[data_rng.random_range(0..slices.len())];
            let mut x = dataset.voxels(i).index_axis(Axis(0), z).to_owned();
            let labels = dataset.labels(i).expect("checked above");
            let mut y = labels.index_axis(Axis(0), z).to_owned();
            if aug_rng.random_bool(cfg.finetune.flip_prob) {
                x = x.slice(s![.., ..;-1]).to_owned();
                y = y.slice(s![.., ..;-1]).to_owned();
            }
            inputs.push(x.insert_axis(Axis(0)));
            targets.push(y);
        }
        let mut logits = Vec::with_capacity(inputs.len());
        let mut traces = Vec::with_capacity(inputs.len());
        for x in &inputs {
            let (l, t) = model.forward_train(x)?;
            logits.push(l);
            traces.push(t);
        }
        let (loss, grads) = segmentation_loss(&logits, &targets)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostic: serde_json::json!({"ce": loss.ce, "dice_loss": loss.dice_loss})
                    .to_string(),
            });
        }
        model.zero_grad();
        for (t, g) in traces.iter().zip(&grads) {
            model.backward(t, g);
        }
        adam.step(&mut model);
        log.push(FinetuneRecord {
            step,
            total: loss.total,
            ce: loss.ce,
            dice_loss: loss.dice_loss,
        });
    }
    Ok(FinetuneOutcome {
        model,
        log,
        manifest,
    })
}
