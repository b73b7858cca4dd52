use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::pairing::PairingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{section}.optimizer has out-of-range values: {self:?}")))
        }
    }

    /// Learning rate after `step` completed steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: u64,
    /// Defaults to `ceil(total slices / n)`.
    pub iterations_per_epoch: Option<u64>,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            iterations_per_epoch: None,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Probability of mirroring a training slice and its labels.
    pub flip_prob: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 300,
            batch_size: 8,
            flip_prob: 0.5,
            optimizer: OptimizerConfig {
                lr: 1e-4,
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub k: usize,
    /// Labeled-subject budgets.
    pub ms: Vec<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { k: 5, ms: vec![2] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
}

/// Everything a run needs besides the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for fold-level parallelism. Recorded so a snapshot
    /// pins the schedule that produced it.
    pub workers: usize,
    pub data: DataConfig,
    pub pairing: PairingConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            workers: 1,
            data: DataConfig::default(),
            pairing: PairingConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `root`, creating nothing: every segment but
/// the last must already name a table.
fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = match table.get_mut(*part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("override {key:?}: no section {part:?}"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text on top of the defaults, then applies `key=value`
    /// overrides, then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut base = toml::Table::try_from(ExperimentConfig::default()).expect("serializable");
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_dotted(&mut base, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: ExperimentConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }

    /// Field-level and cross-field checks that need no data.
    pub fn validate(&self) -> Result<()> {
        self.pairing.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.model.validate()?;
        self.pretrain.optimizer.validate("pretrain")?;
        self.finetune.optimizer.validate("finetune")?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.finetune.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.finetune.flip_prob) {
            return Err(Error::Config("finetune.flip_prob outside [0, 1]".into()));
        }
        if self.evaluation.k < 2 {
            return Err(Error::Config("evaluation.k must be >= 2".into()));
        }
        if self.evaluation.ms.contains(&0) {
            return Err(Error::Config("evaluation.ms entries must be >= 1".into()));
        }
        if self.loss.s > self.model.stages {
            return Err(Error::Config(format!(
                "loss.s = {} exceeds model.stages = {}",
                self.loss.s, self.model.stages
            )));
        }
        let [h, w] = self.augment.output_size;
        let (gh, gw) = self.model.grid_at(self.loss.s, h, w)?;
        self.loss.check_grid(gh, gw).map_err(|e| {
            Error::Config(format!("{e} (scale {} of a {h}x{w} view)", self.loss.s))
        })
    }

    /// Checks against a concrete dataset: enough subjects and slices for a
    /// pre-training batch, and slice planes the encoder can take.
    pub fn validate_for_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.len() < 2 {
            return Err(Error::Config(format!(
                "dataset has {} subjects, pre-training needs at least 2",
                dataset.len()
            )));
        }
        for i in 0..dataset.len() {
            let (v, h, w) = dataset.voxels(i).dim();
            if v < self.pairing.n / 2 {
                return Err(Error::Config(format!(
                    "pairing.n = {} needs {} slices per subject, {} has {v}",
                    self.pairing.n,
                    self.pairing.n / 2,
                    dataset.subject_id(i)
                )));
            }
            self.model.grid_at(self.model.stages, h, w).map_err(|e| {
                Error::Config(format!("subject {}: {e}", dataset.subject_id(i)))
            })?;
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_with_overrides(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "seed = 3\n[loss]\ntau = 0.2\n",
            &["loss.lambda=0".into(), "model.base_width=8".into(), "loss.la_axis=column".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.loss.tau, 0.2);
        assert_eq!(cfg.loss.lambda, 0.0);
        assert_eq!(cfg.model.base_width, 8);
        assert_eq!(cfg.loss.la_axis, crate::losses::LaAxis::Column);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_with_overrides("", &["loss.lamda=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["nope.x=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("[loss]\nfoo = 1\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["seed".into()]).is_err());
    }

    #[test]
    fn window_must_divide_feature_grid() {
        let e = ExperimentConfig::from_toml_with_overrides("", &["loss.omega=3".into()]);
        assert!(matches!(e, Err(Error::Config(m)) if m.contains("not divisible by window size 3")));
        ExperimentConfig::from_toml_with_overrides("", &["loss.omega=2".into()]).unwrap();
        ExperimentConfig::from_toml_with_overrides(
            "",
            &["loss.omega=3".into(), "augment.output_size=[48, 48]".into()],
        )
        .unwrap();
    }

    #[test]
    fn warmup_ramps_linearly() {
        let o = OptimizerConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..OptimizerConfig::default()
        };
        assert_eq!(o.lr_at(0), 0.25);
        assert_eq!(o.lr_at(3), 1.0);
        assert_eq!(o.lr_at(10), 1.0);
    }
}
