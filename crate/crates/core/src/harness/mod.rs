//! Desk-scale training: the synthetic salient-object data, AdamW with a
//! warm-up cosine schedule, the resumable trainer and evaluation metrics.

mod data;
mod metrics;
mod optim;
mod train;

pub use data::{gen_salient_dataset, salient_mask, Dataset, BACKGROUND, PATCH, PATCH_LOW};
pub use metrics::{argmax, evaluate, mask_coverage, pearson, significance_correlation};
pub use optim::{adamw_step, cosine_lr, AdamW};
pub use train::{EpochStats, TrainConfig, Trainer, TRAIN_STREAM};
