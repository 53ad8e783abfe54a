//! Optimizer, EMA, checkpoints and the training loop.

pub mod checkpoint;
pub mod ema;
pub mod optimizer;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use ema::Ema;
pub use optimizer::{AdamW, AdamWConfig};
pub use trainer::{params_from_checkpoint, write_loss_log, StepReport, TrainConfig, TrainData, Trainer};
