//! Pathwise-derivative training loop.
//!
//! Each iteration alternates one discriminator ascent step with one policy
//! descent step through the differentiable single-step denoiser: rollouts
//! are generated without recording, a fresh timestep is drawn per
//! (x0, ε) pair, and the discriminator's signal backpropagates through
//! `D(x0')` into the field parameters. An optional CFM term on expert
//! samples (weight λ) anchors the policy to the expert manifold, standing
//! in for expert members of hybrid batches, which have no rollout noise
//! pair of their own.
//!
//! The same engine also serves the static-reward baselines: the
//! adversarial term, a static-reward term, and the anchor are weighted
//! independently, and zero-weight terms are skipped entirely so degenerate
//! configurations match their specialized counterparts bitwise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    disc_train_step, generator_pd_loss, mean_sigma, Discriminator, TapedDiscriminator,
    WarmupSchedule,
};
use crate::baselines::StaticReward;
use crate::diffcore::{adamw_step, clip_global_norm, AdamState, Tape, Tensor};
use crate::flow::{
    cfm_loss, euler_sample, sample_denoise_t, single_step_denoise, FlowSample, TapedVectorField,
    VectorField,
};
use crate::harness::runlog::StepMetrics;
use crate::{Error, Result};

/// Knobs of the pathwise-derivative loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PdConfig {
    /// Rollout pairs per conditioning instance.
    pub group_size: usize,
    /// Denoise step size; rollouts use round(1/Δt) Euler steps.
    pub delta_t: f64,
    pub lr_theta: f64,
    pub lr_omega: f64,
    /// Weight λ of the expert CFM anchor.
    pub bc_weight: f64,
    pub bc_pretrain_steps: u64,
    pub total_steps: u64,
    pub warmup: WarmupSchedule,
    pub grad_clip: f64,
}

impl Default for PdConfig {
    fn default() -> Self {
        PdConfig {
            group_size: 3,
            delta_t: 1.0 / 28.0,
            lr_theta: 1e-3,
            lr_omega: 1e-3,
            bc_weight: 0.1,
            bc_pretrain_steps: 0,
            total_steps: 1000,
            warmup: WarmupSchedule { warmup_steps: 25 },
            grad_clip: 1.0,
        }
    }
}

impl PdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 1 {
            return Err(Error::Contract(format!(
                "group_size must be >= 1, got {}",
                self.group_size
            )));
        }
        if self.bc_weight < 0.0 {
            return Err(Error::Contract(format!(
                "bc_weight must be >= 0, got {}",
                self.bc_weight
            )));
        }
        if self.lr_theta <= 0.0 || self.lr_omega <= 0.0 {
            return Err(Error::Contract("learning rates must be > 0".into()));
        }
        if !(0.0 < self.delta_t && self.delta_t <= 0.5) {
            return Err(Error::Contract(format!(
                "delta_t must lie in (0, 0.5], got {}",
                self.delta_t
            )));
        }
        Ok(())
    }

    pub fn n_euler_steps(&self) -> usize {
        (1.0 / self.delta_t).round() as usize
    }
}

/// Weighted composition of the pathwise policy objective.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PdObjective<'a> {
    /// Weight on the adversarial term `-log σ(D(x0'))`.
    pub fail_weight: f64,
    /// Static reward with its ascent weight (entering as `-w·reward`).
    pub static_reward: Option<(&'a StaticReward, f64)>,
    pub update_disc: bool,
}

impl PdObjective<'_> {
    pub(crate) fn adversarial() -> Self {
        PdObjective {
            fail_weight: 1.0,
            static_reward: None,
            update_disc: true,
        }
    }
}

/// Mutable state of a pathwise run.
pub struct PdState {
    pub policy: VectorField,
    pub policy_opt: AdamState,
    pub disc: Option<Discriminator>,
    pub disc_opt: Option<AdamState>,
    pub step: u64,
}

/// One Algorithm-1-style iteration: rollouts, discriminator step, policy
/// step through the single-step denoiser (plus λ-weighted expert anchor).
pub fn pd_train_step(
    state: &mut PdState,
    cfg: &PdConfig,
    expert_batch: &[(Vec<f64>, usize)],
    rng_rollout: &mut ChaCha8Rng,
    rng_time: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    pd_engine_step(
        state,
        cfg,
        expert_batch,
        PdObjective::adversarial(),
        rng_rollout,
        rng_time,
    )
}

pub(crate) fn pd_engine_step(
    state: &mut PdState,
    cfg: &PdConfig,
    expert_batch: &[(Vec<f64>, usize)],
    objective: PdObjective<'_>,
    rng_rollout: &mut ChaCha8Rng,
    rng_time: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    cfg.validate()?;
    if expert_batch.is_empty() {
        return Err(Error::Contract("pd step requires an expert batch".into()));
    }
    let d = state.policy.data_dim;
    let n_steps = cfg.n_euler_steps();
    let step = state.step;
    let diverged = |reason: String| Error::Diverged { step, reason };

    // (x0, ε) rollout pairs, generated without recording gradients.
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
    for (_, cond) in expert_batch {
        for _ in 0..cfg.group_size {
            let eps: Vec<f64> = (0..d).map(|_| rng_rollout.sample(StandardNormal)).collect();
            let x0 = euler_sample(&state.policy, &eps, *cond, n_steps)
                .map_err(|e| diverged(format!("rollout failed: {e}")))?;
            pairs.push((x0, eps, *cond));
        }
    }
    let rollout_batch: Vec<(Vec<f64>, usize)> = pairs
        .iter()
        .map(|(x0, _, cond)| (x0.clone(), *cond))
        .collect();

    let mut disc_loss_value = None;
    let mut grad_norm_disc = None;
    if objective.update_disc {
        if let (Some(disc), Some(opt)) = (state.disc.as_mut(), state.disc_opt.as_mut()) {
            let (l, n) = disc_train_step(disc, opt, expert_batch, &rollout_batch, cfg.grad_clip)?;
            disc_loss_value = Some(l);
            grad_norm_disc = Some(n);
        }
    }

    let mut sigma_expert = None;
    let mut sigma_policy = None;
    if let Some(disc) = state.disc.as_ref() {
        sigma_expert = Some(mean_sigma(disc, expert_batch)?);
        sigma_policy = Some(mean_sigma(disc, &rollout_batch)?);
    }

    let mut metrics = StepMetrics {
        step: state.step + 1,
        disc_loss: disc_loss_value,
        sigma_expert,
        sigma_policy,
        grad_norm_disc,
        ..StepMetrics::default()
    };

    if !cfg.warmup.policy_frozen(state.step) {
        let mut tape = Tape::new();
        let tvf = TapedVectorField::record(&mut tape, &state.policy);
        let tdisc = state
            .disc
            .as_ref()
            .map(|disc| TapedDiscriminator::record(&mut tape, disc));

        // Single-step denoise per pair, each with a fresh bounded timestep.
        let mut denoised = Vec::with_capacity(pairs.len());
        for (x0, eps, cond) in &pairs {
            let t = sample_denoise_t(rng_time, cfg.delta_t);
            let node = single_step_denoise(&mut tape, &tvf, x0, eps, t, cfg.delta_t, *cond)?;
            denoised.push((node, *cond));
        }

        let mut loss_terms = Vec::new();
        if objective.fail_weight != 0.0 {
            let disc_nodes = tdisc.as_ref().ok_or_else(|| {
                Error::Contract("adversarial pathwise loss needs a discriminator".into())
            })?;
            let adv = generator_pd_loss(&mut tape, disc_nodes, &denoised)?;
            loss_terms.push(tape.scale(adv, objective.fail_weight));
        }
        if let Some((reward, w_r)) = objective.static_reward {
            if w_r != 0.0 {
                let mut reward_nodes = Vec::with_capacity(denoised.len());
                for &(node, _) in &denoised {
                    reward_nodes.push(reward.node(&mut tape, node)?);
                }
                let rmean = tape.mean_of(&reward_nodes)?;
                metrics.reward_static_mean = Some(tape.value(rmean).item());
                loss_terms.push(tape.scale(rmean, -w_r));
            }
        }
        if cfg.bc_weight > 0.0 {
            let mut anchor_terms = Vec::with_capacity(expert_batch.len());
            for (x_e, cond) in expert_batch {
                let t: f64 = rng_time.gen_range(0.0..1.0);
                let eps: Vec<f64> = (0..d).map(|_| rng_time.sample(StandardNormal)).collect();
                let sample = FlowSample::new(x_e.clone(), eps, t, *cond)?;
                anchor_terms.push(cfm_loss(&mut tape, &tvf, &sample)?);
            }
            let anchor = tape.mean_of(&anchor_terms)?;
            metrics.cfm_anchor = Some(tape.value(anchor).item());
            loss_terms.push(tape.scale(anchor, cfg.bc_weight));
        }
        if loss_terms.is_empty() {
            return Err(Error::Contract(
                "pd objective has no active terms (all weights zero)".into(),
            ));
        }
        let mut loss = loss_terms[0];
        for &t in &loss_terms[1..] {
            loss = tape.add(loss, t)?;
        }
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(diverged(format!("non-finite policy loss: {loss_value}")));
        }
        let grads = tape.backward(loss)?;
        let mut g = tvf.grads(&tape, &grads);
        let norm = clip_global_norm(&mut g, cfg.grad_clip)?;
        let mut params: Vec<Tensor> = state.policy.flatten();
        adamw_step(&mut params, &g, &mut state.policy_opt)?;
        state.policy.assign(&params);

        metrics.gen_loss = Some(loss_value);
        metrics.grad_norm_policy = Some(norm);
    }

    state.step += 1;
    Ok(metrics)
}
