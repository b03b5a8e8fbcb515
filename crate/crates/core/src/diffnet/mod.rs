//! Differentiable policy/value networks.
//!
//! The module is deliberately small: a row-major [`Mat`], a reverse-mode
//! [`Graph`] over the handful of primitives that PPO-style objectives need,
//! an MLP with a diagonal-Gaussian head, and an Adam optimizer.

mod gauss;
mod mat;
mod network;
mod optim;
mod tape;

pub use gauss::{entropy, kl_divergence, log_prob, GaussDist};
pub use mat::{
    affine_forward, gauss_kl_forward, gauss_kl_scalar, gauss_log_prob_forward, relu_forward, Mat,
    HALF_LN_2PI, LOG_STD_MAX, LOG_STD_MIN,
};
pub use network::{
    bind, forward, forward_batch, forward_graph, forward_policy, grad, grad_many, init_network,
    Activation, BatchOutput, GradVector, Layout, NetOutputs, NetVars, NetworkSpec, ParamVector,
    TensorRole, TensorSlot,
};
pub use optim::{adam_step, adam_update, clip_grad_norm, clip_grad_norm_in_place, AdamState};
pub use tape::{Graph, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("rejected input: {0}")]
    RejectedInput(String),
    #[error("parameter layout mismatch: expected {expected} values, found {found}")]
    LayoutMismatch { expected: usize, found: usize },
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
}
