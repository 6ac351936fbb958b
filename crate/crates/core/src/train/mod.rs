//! Causal training through the parallel representation.

pub mod copy_task;
pub mod corpus;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use copy_task::{copy_accuracy, copy_task_batch, CopyBatch, CopyTaskSpec};
pub use loss::{sequence_ce, shifted_ce_loss};
pub use optim::{OptimizerConfig, OptimizerState};
pub use trainer::{batch_loss_and_grad, train_loop, DataConfig, DataSource, MetricsRecord, RunConfig, RunOutputs, TrainBatch, TrainConfig};
