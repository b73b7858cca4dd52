use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::optim::Adam;
use super::{rng_stream, STREAM_DATA, STREAM_INIT};
use crate::data::{Dataset, UnlabeledVolume};
use crate::error::{Error, Result};
use crate::losses::{overall_loss_grad, ViewOutputs};
use crate::model::{Checkpoint, Encoder, PretrainHeads, RngSnapshot};
use crate::nn::{Param, Parameterized};
use crate::pairing::{sample_pretrain_batch, PairPlan};

/// Encoder plus the self-supervised heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainNet {
    pub encoder: Encoder,
    pub heads: PretrainHeads,
}

impl Parameterized for PretrainNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&format!("{prefix}encoder."), f);
        self.heads.visit(&format!("{prefix}heads."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&format!("{prefix}encoder."), f);
        self.heads.visit_mut(&format!("{prefix}heads."), f);
    }
}

/// One line of the pre-training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub gp_term: f64,
    pub la_term: f64,
    pub total: f64,
    pub num_la_pairs: usize,
    pub lr: f64,
}

/// Resumable pre-training state.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    cfg: ExperimentConfig,
    net: PretrainNet,
    adam: Adam,
    data_rng: ChaCha8Rng,
    step: u64,
}

fn to_f64(a: &Array3<f32>) -> Array3<f64> {
    a.mapv(f64::from)
}

fn view_input(plan: &PairPlan, k: usize) -> Array3<f32> {
    plan.views[k].pixels.clone().insert_axis(Axis(0))
}

impl Pretrainer {
    /// Fresh state. The epoch length is resolved against `dataset` and
    /// written into the configuration snapshot.
    pub fn new(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        cfg.validate_for_dataset(dataset)?;
        let mut cfg = cfg.clone();
        if cfg.pretrain.iterations_per_epoch.is_none() {
            let slices: usize = (0..dataset.len()).map(|i| dataset.voxels(i).dim().0).sum();
            cfg.pretrain.iterations_per_epoch = Some(slices.div_ceil(cfg.pairing.n) as u64);
        }
        let mut init = rng_stream(cfg.seed, STREAM_INIT);
        let net = PretrainNet {
            encoder: Encoder::new(&cfg.model, &mut init)?,
            heads: PretrainHeads::new(&cfg.model, cfg.loss.s, &mut init)?,
        };
        let adam = Adam::new(&cfg.pretrain.optimizer, &net);
        Ok(Pretrainer {
            data_rng: rng_stream(cfg.seed, STREAM_DATA),
            cfg,
            net,
            adam,
            step: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn net(&self) -> &PretrainNet {
        &self.net
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        self.cfg.pretrain.iterations_per_epoch.unwrap_or(1).max(1)
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.pretrain.epochs * self.iterations_per_epoch()
    }

    /// Sample a batch, compute the overall loss and take one optimizer step.
    pub fn step(&mut self, volumes: &[UnlabeledVolume<'_>]) -> Result<StepRecord> {
        let plan = sample_pretrain_batch(
            volumes,
            &self.cfg.pairing,
            &self.cfg.augment,
            &mut self.data_rng,
        )?;
        let s = self.cfg.loss.s;
        let deepest = self.net.encoder.num_stages();
        let mut traces = Vec::with_capacity(plan.len());
        let mut fmaps = Vec::with_capacity(plan.len());
        let mut globals = Vec::with_capacity(plan.len());
        for k in 0..plan.len() {
            let trace = self.net.encoder.forward(&view_input(&plan, k))?;
            fmaps.push(to_f64(&trace.features[s - 1]));
            globals.push(self.net.heads.global_feature(&trace.features[deepest - 1]));
            traces.push(trace);
        }
        let outputs = ViewOutputs { fmaps, globals };
        let embed = self.net.heads.embed_params();
        let (b, grad) = overall_loss_grad(&plan, &outputs, &embed, &self.cfg.loss)?;
        if !b.total.is_finite() {
            let views: Vec<_> = plan
                .views
                .iter()
                .map(|v| serde_json::json!([v.subject_id, v.slice_index, v.view_id]))
                .collect();
            let diagnostic = serde_json::json!({
                "gp_term": b.gp_term,
                "la_term": b.la_term,
                "num_la_pairs": b.num_la_pairs,
                "views": views,
            });
            return Err(Error::NonFiniteLoss {
                step: self.step,
                diagnostic: diagnostic.to_string(),
            });
        }
        let local = self.cfg.loss.lambda != 0.0 && b.num_la_pairs > 0;
        self.net.zero_grad();
        if local {
            self.net.heads.add_embed_grad(&grad.embed);
        }
        for (k, trace) in traces.iter().enumerate() {
            let mut grads: Vec<Option<Array3<f32>>> = vec![None; deepest];
            let g_global = self
                .net
                .heads
                .global_feature_backward(&trace.features[deepest - 1], &grad.globals[k]);
            grads[deepest - 1] = Some(g_global);
            if local {
                let g_local = grad.fmaps[k].mapv(|v| v as f32);
                grads[s - 1] = Some(match grads[s - 1].take() {
                    Some(g) => g + g_local,
                    None => g_local,
                });
            }
            self.net.encoder.backward(trace, grads);
        }
        let lr = self.adam.current_lr();
        self.adam.step(&mut self.net);
        let record = StepRecord {
            step: self.step,
            epoch: self.step / self.iterations_per_epoch(),
            gp_term: b.gp_term,
            la_term: b.la_term,
            total: b.total,
            num_la_pairs: b.num_la_pairs,
            lr,
        };
        self.step += 1;
        Ok(record)
    }

    /// Model, optimizer moments, counters, RNG position and configuration.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new("pretrain", self.cfg.to_json());
        ckpt.push_module("", &self.net);
        self.adam.save(&mut ckpt, &self.net);
        ckpt.meta.step = self.step;
        ckpt.meta.epoch = self.step / self.iterations_per_epoch();
        ckpt.meta
            .rng
            .insert("data".into(), RngSnapshot::capture(&self.data_rng));
        ckpt
    }

    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != "pretrain" {
            return Err(Error::Checkpoint(format!(
                "cannot resume pre-training from a {} checkpoint",
                ckpt.meta.kind
            )));
        }
        let cfg: ExperimentConfig = serde_json::from_value(ckpt.meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        cfg.validate()?;
        // Shapes come from a throwaway initialization.
        let mut init = ChaCha8Rng::seed_from_u64(0);
        let mut net = PretrainNet {
            encoder: Encoder::new(&cfg.model, &mut init)?,
            heads: PretrainHeads::new(&cfg.model, cfg.loss.s, &mut init)?,
        };
        ckpt.restore_module("", &mut net)?;
        let adam = Adam::restore(&cfg.pretrain.optimizer, ckpt.meta.step, ckpt, &net)?;
        let data_rng = ckpt
            .meta
            .rng
            .get("data")
            .ok_or_else(|| Error::Checkpoint("missing data rng".into()))?
            .restore()?;
        Ok(Pretrainer {
            cfg,
            net,
            adam,
            data_rng,
            step: ckpt.meta.step,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Runs all configured epochs. Only label-free views of the volumes are
/// touched. `on_step` sees every record as it is produced.
pub fn pretrain(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PretrainOutcome> {
    let mut trainer = Pretrainer::new(cfg, dataset)?;
    let volumes = dataset.unlabeled();
    let mut log = Vec::with_capacity(trainer.total_steps() as usize);
    while trainer.steps_done() < trainer.total_steps() {
        let rec = trainer.step(&volumes)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(PretrainOutcome {
        checkpoint: trainer.checkpoint(),
        log,
    })
}
