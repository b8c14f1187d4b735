//! Optimization: configuration, schedule, Adam, steps, evaluation, the
//! epoch loop and checkpoints.

mod checkpoint;
mod config;
mod optim;
mod run;
mod step;

pub use checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint, CheckpointKind, MAGIC, VERSION};
pub(crate) use checkpoint::{meta_tensors, optimizer_tensors};
pub use config::{InitMode, TRecgConfig, TrainMode};
pub use optim::{adam_step, lr_at_epoch, AdamParams, OptimState};
pub use run::{epoch_rng, pretrain_unlabeled, train_loop, EpochMetrics, LoopOptions, TrainOutcome, CSV_HEADER, FINAL_CKPT, LATEST_CKPT, METRICS_FILE};
pub use step::{evaluate, evaluate_with, forward_backward, mean_class_accuracy, train_step, EvalReport, StepMetrics};
pub(crate) use step::argmax_rows;
