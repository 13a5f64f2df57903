//! Self-contained reverse-mode differentiation over dense `f64` arrays,
//! small feed-forward networks, and an AdamW optimizer with global-norm
//! gradient clipping. Everything downstream records its losses on a
//! [`Tape`] and pulls exact gradients out of [`Tape::backward`].

mod gradcheck;
mod kernels;
mod mlp;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub(crate) use kernels::affine as affine_kernel;
pub(crate) use kernels::{log_sigmoid, sigmoid, softplus};
pub use mlp::{Activation, Layer, MlpParams, TapedMlp};
pub use optim::{adamw_step, clip_global_norm, AdamHyper, AdamState};
pub use tape::{Grads, NodeId, Op, Tape};
pub use tensor::{param_fingerprint, Shape, Tensor};
