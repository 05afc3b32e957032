//! Synthetic data, metrics, training and evaluation.

mod data;
mod metrics;
mod trainer;

pub use data::{generate_dataset, generate_sample, make_batch, DatasetSpec, SegSample, CLASS_NAMES, NUM_CLASSES, PALETTE};
pub use metrics::{miou, ConfusionMatrix, MiouResult};
pub use trainer::{evaluate, train, train_model, val_spec, write_log, LogRow, TrainConfig, TrainOutcome, VAL_SEED_OFFSET};
