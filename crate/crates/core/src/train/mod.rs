//! Pre-training: learning-rate schedule, AdamW, clipping and the loop over
//! token shards.

mod hyper;
mod optim;
mod run;

pub use hyper::{lr_at, TrainHyper};
pub use optim::{adamw_step, clip_gradients, OptimizerState};
pub use run::{train, train_from, write_loss_log, BatchReader, LossRow, TrainOutcome};
