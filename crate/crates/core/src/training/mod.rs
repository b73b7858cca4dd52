//! Pre-training with the overall objective and supervised fine-tuning.

mod config;
mod finetune;
mod optim;
mod pretrain;

pub use config::{
    DataConfig, EvaluationConfig, ExperimentConfig, FinetuneConfig, OptimizerConfig,
    OptimizerKind, PretrainConfig,
};
pub use finetune::{finetune, segmentation_loss, FinetuneOutcome, FinetuneRecord, SegLoss};
pub use optim::Adam;
pub use pretrain::{pretrain, PretrainNet, PretrainOutcome, Pretrainer, StepRecord};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_DATA: u64 = 0;
pub const STREAM_AUGMENT: u64 = 1;
pub const STREAM_INIT: u64 = 2;

/// Independent generator `stream` of a run seeded with `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
