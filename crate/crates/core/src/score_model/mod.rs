//! Analytic scores, denoising score matching and a small trainable score
//! network.

pub mod analytic;
pub mod checkpoint;
pub mod data;
pub mod mlp;
pub mod net;
pub mod train;

pub use analytic::{
    gaussian_log_density, kernel_score, mixture_log_density, mixture_score, true_score_kernel, true_score_mixture,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use data::{Component, DataKind, DataSpec, DegradationSpec, TrainingPair, TrainingSource};
pub use mlp::{Activation, Layer, Mlp};
pub use net::{NetQuery, ScoreNet, TIME_FEATURES};
pub use train::{
    draw_batch, dsm_loss, train, train_monitored, DsmSample, LossWeightMode, OptimizerKind, TrainConfig, TrainOutcome,
};
