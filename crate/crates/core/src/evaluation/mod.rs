//! Dice scoring, cross-validation folds with limited label budgets, and
//! the pre-train / fine-tune comparison protocol.

mod dice;
mod folds;
mod protocol;

pub use dice::{dice, mean_dsc, mean_over_subjects, predict_volume, SubjectDice};
pub use folds::{make_folds, Fold, FoldPlan};
pub use protocol::{
    evaluate_subjects, fold_seed, run_protocol, FoldRecord, Method, ResultRow, ResultTable,
};
