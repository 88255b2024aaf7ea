//! Objective, optimizer, schedule, checkpoints and the training loop.

mod checkpoint;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_VERSION, MAGIC};
pub use loss::{
    aux_loss, batch_objective, huber, masked_huber_mean, objective_graph, total_loss, LossBreakdown, DEFAULT_DELTA,
};
pub use optim::{adamw_step, global_norm, AdamWConfig, OptimizerState};
pub use schedule::lr_at_step;
pub use trainer::{train_loop, RunConfig, StepRecord, TrainConfig, Trainer};
