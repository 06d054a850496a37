//! Optimisation, losses, cross-validation and synthetic data.

mod adam;
mod checkpoint;
mod kfold;
mod loss;
pub mod synthetic;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use kfold::{random_kfold, stratified_kfold, FoldSplit};
pub use loss::{cross_entropy, rdrop_loss, symmetric_kl};
pub use synthetic::{make_synthetic, SynthConfig};
pub use trainer::{
    cross_validate, cross_validate_baseline, evaluate, predict, train_fold, Baseline, CvReport,
    CvSummary, EpochRecord, Evaluation, FoldReport, History, PreparedSet, TrainConfig,
};
