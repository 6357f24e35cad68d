//! Experiment orchestration: configuration, folds, the target cache,
//! training, evaluation, prediction and ablation runs.

mod ablation;
mod config;
mod data;
mod eval;
mod folds;
mod train;

pub use ablation::{parse_variants, run_ablation, AblationRow, AblationTable};
pub use config::{
    target_cache_key, ExperimentConfig, ModelConfig, OptimizerConfig, TrainingConfig, DATA_ROOT_ENV, LABEL_MAP_FILE,
};
pub use data::{
    discover_cases, image_path, label_path, load_ground_truth, make_targets, network_input, PreparedCase, TargetCache,
    IMAGE_SUFFIX, LABEL_SUFFIX,
};
pub use eval::{evaluate, evaluate_to_dir, export_attention_maps, predict, predict_labels, predict_with_outputs};
pub use folds::{select_fold, split_folds, Fold};
pub use train::{
    train, train_fold, train_prepared, train_with, validate_cases, Checkpoint, NativeCase, StepRecord, TrainOutcome,
    Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_HEADER, TRAIN_LOG, VAL_LOG,
};
