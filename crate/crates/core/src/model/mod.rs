//! GPT-2 family decoder: configuration, weights, forward and backward passes.

mod config;
mod forward;
pub(crate) mod kernels;
pub(crate) mod weights;

pub use config::{
    param_count_approx, param_count_empirical, param_count_exact, ModelConfig, TABLE_DEPTHS,
};
pub use forward::{
    backward, backward_scaled, cross_entropy, forward, forward_hidden, forward_with_adapter, loss_and_grads,
    masked_loss,
    ForwardPass, GradMode, Grads, Hidden, TokenBatch, IGNORE_INDEX,
};
pub use weights::{init_model, BlockWeights, ModelWeights, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
