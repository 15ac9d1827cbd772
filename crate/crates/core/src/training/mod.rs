//! Weighted objective, Adam, the warmup schedule, two-stage training and
//! checkpoints.

mod checkpoint;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{constrained_loss, constrained_rows, LossTerms};
pub use optim::{lr_at_step, Adam};
pub use trainer::{train, Stage, StepRecord, TrainConfig, TrainLog, Trainer};
