//! Desk-scale decoder-only transformer used as a numerical oracle: packed
//! computation must reproduce batched (unpacked) computation for logits,
//! rewards, reward-model and DPO losses, and their gradients.

pub mod equivalence;
pub mod graph;
pub mod loss;
pub mod model;
pub mod params;
pub mod tensor;

pub use equivalence::{
    compare_example, finite_difference_check, sample_coordinates, ExampleEquivalence, FdSample,
    Tolerances,
};
pub use loss::{
    dpo_loss, dpo_loss_and_grad, gradient, response_logprob, response_scores, reward_score,
    rm_loss, rm_loss_and_grad, DpoGradients, LossOptions, Pipeline, RankReduction,
};
pub use model::{
    forward, forward_causal, AttentionMask, CausalMask, DenseMask, ForwardOutput, ForwardRequest,
    LeakyPackedMask,
};
pub use params::{
    init_params, params_from_json, params_to_json, sum_gradients, Gradients, PositionalScheme,
    Precision, RefNetConfig, RefNetParams,
};
pub use tensor::{Matrix, Real};

#[derive(Debug, thiserror::Error)]
pub enum RefNetError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid forward request: {0}")]
    Request(String),
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
