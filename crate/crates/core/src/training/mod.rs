//! Losses, optimization, fold protocol and training loops.

mod crossval;
mod folds;
mod loss;
mod optim;
mod trainer;

pub use crossval::{
    cross_validate, cross_validate_splits, fold_weights_name, CrossValOutcome, FoldResult,
};
pub use folds::{make_folds, FoldSplit};
pub use loss::{ce_dice_loss, rmi_loss, LossKind, LossParts, RMI_EPS};
pub use optim::{sgd_step, Plateau, PlateauConfig, PlateauStep, SgdConfig, SgdState};
pub use trainer::{
    evaluate_loss, train_fold, train_fold_cases, train_fold_cases_with, CaseStore, EpochRecord,
    FoldOutcome, PreparedCase, TrainConfig, TrainHistory, HISTORY_CSV_HEADER,
};
