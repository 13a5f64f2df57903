//! Desk-scale laboratory for flow-matching adversarial imitation learning.
//!
//! A generator policy is a conditioned vector field `v_θ(x, t, c)` trained so
//! that integrating it transports Gaussian noise onto an expert distribution.
//! A discriminator `D_ω(x, c)` is trained to tell expert samples from policy
//! samples, and its signal drives the policy either through pathwise
//! derivatives (differentiating a single-step denoising estimate of the clean
//! sample) or through scalar rewards with a clipped-ratio surrogate and a
//! CFM-difference KL penalty.
//!
//! Layout:
//! - [`diffcore`] — tape-based reverse-mode differentiation, MLPs, AdamW.
//! - [`flow`] — interpolation path, CFM loss, Euler sampler, single-step denoise.
//! - [`adversary`] — discriminator variants, adversarial losses, spectral norm.
//! - [`fail_pd`] / [`fail_pg`] — the two adversarial training loops.
//! - [`baselines`] — SFT, static-reward trainers, online DPO, combined losses.
//! - [`eval`] — synthetic expert targets and two-sample distribution metrics.
//! - [`harness`] — config parsing, deterministic runs, logging, checkpoints, CLI.

pub mod adversary;
pub mod baselines;
pub mod diffcore;
pub mod eval;
pub mod fail_pd;
pub mod fail_pg;
pub mod flow;
pub mod harness;

pub use harness::config::ConfigError;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/network dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A gradient, parameter, or loss value stopped being finite.
    #[error("non-finite {what} (parameter {index})")]
    NonFinite { what: &'static str, index: usize },

    /// The single-step denoise denominator `1 - (t + Δt)` is too close to zero.
    #[error("near-singular denominator in single-step denoise: t={t}, delta_t={delta_t}")]
    NearSingularDenoise { t: f64, delta_t: f64 },

    /// ODE sampling produced a non-finite state.
    #[error("non-finite state during sampling at integration step {step}")]
    Sampling { step: usize },

    /// A training run produced a non-finite loss and was aborted.
    #[error("run diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
