//! Optimization, the training loop, evaluation metrics and checkpoints.

pub mod checkpoint;
mod metrics;
mod optim;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{
    evaluate, iou, predict_spans, recovery_accuracy, MetricsReport, RecoveryAccuracy,
    SpanPrediction, THRESHOLDS,
};
pub use optim::{adamw_step, clip_grad_norm, lr_schedule, AdamWParams, AdamWState};
pub use trainer::{train, EpochLog, Observer, StepLog, TrainConfig, TrainOutcome};
