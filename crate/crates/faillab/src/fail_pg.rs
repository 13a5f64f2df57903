//! Policy-gradient training loop.
//!
//! Each iteration: roll out `G` samples per conditioning, update the
//! discriminator, convert its logits into scalar rewards
//! `r(x) = -log(1-σ(D(x)))`, standardize rewards into advantages within
//! each group, then take clipped-ratio surrogate steps where the
//! likelihood ratio is approximated through the CFM-loss difference
//!
//! ```text
//! r(θ) = exp(L_CFM(θ_old, x) - L_CFM(θ, x))
//! ```
//!
//! under common random numbers, with a KL penalty toward a frozen
//! reference policy estimated as `mean[L_CFM(θ_ref, x) - L_CFM(θ, x)]`.
//!
//! Expert samples join each group as perfect rollouts: they take part in
//! advantage normalization and receive surrogate updates (their CFM ratio
//! needs only the sample itself). The KL estimate uses policy rollouts
//! only, since its expectation runs over the current policy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adversary::{disc_train_step, mean_sigma, pg_reward, Discriminator, WarmupSchedule};
use crate::baselines::StaticReward;
use crate::diffcore::{adamw_step, clip_global_norm, AdamState, NodeId, Tape, Tensor};
use crate::flow::{cfm_loss, cfm_value, euler_sample, FlowSample, TapedVectorField, VectorField};
use crate::harness::runlog::StepMetrics;
use crate::{Error, Result};

/// Exponent cap on the CFM-difference ratio (divergence guard).
pub const RATIO_EXP_CAP: f64 = 30.0;

/// Knobs of the policy-gradient loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PgConfig {
    /// Rollouts per conditioning; the advantage std needs at least 2.
    pub group_size: usize,
    pub clip_eps: f64,
    pub inner_epochs: usize,
    pub beta_kl: f64,
    /// Floor on the advantage denominator.
    pub adv_eps: f64,
    /// (t, ε) draws per sample for each Monte Carlo CFM estimate.
    pub mc_pairs: usize,
    /// Inference step size; rollouts use round(1/Δt) Euler steps.
    pub delta_t: f64,
    pub warmup: WarmupSchedule,
    pub grad_clip: f64,
    pub total_steps: u64,
}

impl Default for PgConfig {
    fn default() -> Self {
        PgConfig {
            group_size: 3,
            clip_eps: 0.2,
            inner_epochs: 1,
            beta_kl: 0.05,
            adv_eps: 1e-8,
            mc_pairs: 4,
            delta_t: 1.0 / 28.0,
            warmup: WarmupSchedule { warmup_steps: 25 },
            grad_clip: 1.0,
            total_steps: 1000,
        }
    }
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Contract(format!(
                "group_size must be >= 2 (advantage std undefined for G=1), got {}",
                self.group_size
            )));
        }
        if !(0.0 < self.clip_eps && self.clip_eps < 1.0) {
            return Err(Error::Contract(format!(
                "clip_eps must lie in (0,1), got {}",
                self.clip_eps
            )));
        }
        if self.beta_kl < 0.0 {
            return Err(Error::Contract(format!(
                "beta_kl must be >= 0, got {}",
                self.beta_kl
            )));
        }
        if self.inner_epochs < 1 || self.mc_pairs < 1 {
            return Err(Error::Contract(
                "inner_epochs and mc_pairs must be >= 1".into(),
            ));
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

/// One group member: a policy rollout or a hybrid expert sample.
#[derive(Clone, Debug)]
pub struct GroupMember {
    pub x0: Vec<f64>,
    pub is_expert: bool,
    /// Cached (t, ε) draws shared by every CFM evaluation of this member.
    pub draws: Vec<(f64, Vec<f64>)>,
    pub reward: f64,
    pub advantage: f64,
}

/// All members sharing one conditioning instance.
#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub cond: usize,
    pub members: Vec<GroupMember>,
}

/// Standardize rewards within a group: `(r - mean) / max(pop std, adv_eps)`.
/// Bitwise-equal rewards give exactly zero advantages.
pub fn grpo_advantages(rewards: &[f64], adv_eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "grpo_advantages requires at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(adv_eps);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Mean CFM loss over cached draws, tape-free. Mirrors the fold order of
/// [`mc_cfm_loss`] exactly, so both paths agree bitwise.
pub fn mc_cfm_value(
    vf: &VectorField,
    x0: &[f64],
    cond: usize,
    draws: &[(f64, Vec<f64>)],
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Contract("mc_cfm_value requires draws".into()));
    }
    let mut acc = 0.0;
    for (i, (t, eps)) in draws.iter().enumerate() {
        let sample = FlowSample::new(x0.to_vec(), eps.clone(), *t, cond)?;
        let l = cfm_value(vf, &sample)?;
        if i == 0 {
            acc = l;
        } else {
            acc += l;
        }
    }
    Ok(acc * (1.0 / draws.len() as f64))
}

/// Mean CFM loss over cached draws, recorded on the tape.
pub fn mc_cfm_loss(
    tape: &mut Tape,
    vf: &TapedVectorField,
    x0: &[f64],
    cond: usize,
    draws: &[(f64, Vec<f64>)],
) -> Result<NodeId> {
    if draws.is_empty() {
        return Err(Error::Contract("mc_cfm_loss requires draws".into()));
    }
    let mut terms = Vec::with_capacity(draws.len());
    for (t, eps) in draws {
        let sample = FlowSample::new(x0.to_vec(), eps.clone(), *t, cond)?;
        terms.push(cfm_loss(tape, vf, &sample)?);
    }
    tape.mean_of(&terms)
}

/// Ratio node `exp(min(l_old - L(θ,x), cap))`; the flag reports a cap hit.
pub fn fpo_ratio_node(tape: &mut Tape, l_old: f64, l_new: NodeId) -> Result<(NodeId, bool)> {
    let old_node = tape.constant_scalar(l_old);
    let exponent = tape.sub(old_node, l_new)?;
    let flagged = tape.value(exponent).item() > RATIO_EXP_CAP;
    let cap = tape.constant_scalar(RATIO_EXP_CAP);
    let over = tape.sub(exponent, cap)?;
    let over = tape.relu(over);
    let capped = tape.sub(exponent, over)?;
    Ok((tape.exp(capped), flagged))
}

/// Value-level FPO ratio for a sample under cached draws.
pub fn fpo_ratio_value(
    policy: &VectorField,
    policy_old: &VectorField,
    x0: &[f64],
    cond: usize,
    draws: &[(f64, Vec<f64>)],
) -> Result<(f64, bool)> {
    let l_old = mc_cfm_value(policy_old, x0, cond, draws)?;
    let l_new = mc_cfm_value(policy, x0, cond, draws)?;
    let exponent = l_old - l_new;
    let flagged = exponent > RATIO_EXP_CAP;
    Ok((exponent.min(RATIO_EXP_CAP).exp(), flagged))
}

/// Clipped surrogate term (to maximize):
/// `min(ratio·A, clip(ratio, 1-ε, 1+ε)·A)`.
pub fn fpo_loss_node(
    tape: &mut Tape,
    ratio: NodeId,
    advantage: f64,
    clip_eps: f64,
) -> Result<NodeId> {
    let r_a = tape.scale(ratio, advantage);
    let clipped = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)?;
    let c_a = tape.scale(clipped, advantage);
    tape.min(r_a, c_a)
}

/// Value-level clipped surrogate.
pub fn fpo_loss_value(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// KL(π_θ ‖ π_ref) estimate: mean over samples of
/// `L_CFM(θ_ref, x) - L_CFM(θ, x)` under common draws. Exactly zero when
/// `θ == θ_ref` bitwise.
pub fn kl_estimate_value(
    policy: &VectorField,
    policy_ref: &VectorField,
    samples: &[(Vec<f64>, usize)],
    draws: &[Vec<(f64, Vec<f64>)>],
) -> Result<f64> {
    if samples.is_empty() || samples.len() != draws.len() {
        return Err(Error::Contract(
            "kl_estimate needs one draw set per sample".into(),
        ));
    }
    let mut acc = 0.0;
    for (i, ((x0, cond), d)) in samples.iter().zip(draws).enumerate() {
        let term = mc_cfm_value(policy_ref, x0, *cond, d)? - mc_cfm_value(policy, x0, *cond, d)?;
        if i == 0 {
            acc = term;
        } else {
            acc += term;
        }
    }
    Ok(acc * (1.0 / samples.len() as f64))
}

/// How rewards are turned into advantages.
#[derive(Clone, Copy, Debug)]
pub(crate) enum AdvantageMode<'a> {
    /// Discriminator rewards only.
    Disc,
    /// A static analytic reward only (no discriminator involved).
    Static(&'a StaticReward),
    /// Discriminator and static rewards normalized separately per group,
    /// then summed.
    Summed(&'a StaticReward),
}

/// Mutable state of a policy-gradient run.
pub struct PgState {
    pub policy: VectorField,
    pub policy_opt: AdamState,
    /// Frozen BC-initialized reference; bitwise constant across the run.
    pub policy_ref: VectorField,
    pub disc: Option<Discriminator>,
    pub disc_opt: Option<AdamState>,
    pub step: u64,
}

/// One Algorithm-2-style iteration with discriminator rewards.
pub fn pg_train_step(
    state: &mut PgState,
    cfg: &PgConfig,
    expert_batch: &[(Vec<f64>, usize)],
    rng_rollout: &mut ChaCha8Rng,
    rng_time: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    pg_engine_step(
        state,
        cfg,
        expert_batch,
        AdvantageMode::Disc,
        true,
        rng_rollout,
        rng_time,
    )
}

pub(crate) fn pg_engine_step(
    state: &mut PgState,
    cfg: &PgConfig,
    expert_batch: &[(Vec<f64>, usize)],
    mode: AdvantageMode<'_>,
    update_disc: bool,
    rng_rollout: &mut ChaCha8Rng,
    rng_time: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    cfg.validate()?;
    if expert_batch.is_empty() {
        return Err(Error::Contract("pg step requires an expert batch".into()));
    }
    let d = state.policy.data_dim;
    let n_steps = cfg.n_euler_steps();
    let step = state.step;
    let diverged = |reason: String| Error::Diverged { step, reason };

    // Rollout G samples per conditioning instance; the expert joins as a
    // perfect rollout.
    let mut groups = Vec::with_capacity(expert_batch.len());
    for (x_e, cond) in expert_batch {
        let mut members = Vec::with_capacity(cfg.group_size + 1);
        for _ in 0..cfg.group_size {
            let eps: Vec<f64> = (0..d).map(|_| rng_rollout.sample(StandardNormal)).collect();
            let x0 = euler_sample(&state.policy, &eps, *cond, n_steps)
                .map_err(|e| diverged(format!("rollout failed: {e}")))?;
            members.push(GroupMember {
                x0,
                is_expert: false,
                draws: Vec::new(),
                reward: 0.0,
                advantage: 0.0,
            });
        }
        members.push(GroupMember {
            x0: x_e.clone(),
            is_expert: true,
            draws: Vec::new(),
            reward: 0.0,
            advantage: 0.0,
        });
        groups.push(RolloutGroup {
            cond: *cond,
            members,
        });
    }

    let rollout_batch: Vec<(Vec<f64>, usize)> = groups
        .iter()
        .flat_map(|g| {
            g.members
                .iter()
                .filter(|m| !m.is_expert)
                .map(|m| (m.x0.clone(), g.cond))
        })
        .collect();

    // Discriminator ascent (line 5), before rewards are read (line 6).
    let mut disc_loss_value = None;
    let mut grad_norm_disc = None;
    if update_disc {
        if let (Some(disc), Some(opt)) = (state.disc.as_mut(), state.disc_opt.as_mut()) {
            let (l, n) = disc_train_step(disc, opt, expert_batch, &rollout_batch, cfg.grad_clip)?;
            disc_loss_value = Some(l);
            grad_norm_disc = Some(n);
        }
    }

    // Rewards under the updated discriminator, then group advantages.
    let mut reward_mean = None;
    let mut reward_static_mean = None;
    let mut disc_reward_acc = 0.0;
    let mut static_reward_acc = 0.0;
    let mut n_rollouts = 0usize;
    for g in &mut groups {
        let n = g.members.len();
        let mut disc_rewards = Vec::with_capacity(n);
        let mut static_rewards = Vec::with_capacity(n);
        for m in &g.members {
            match mode {
                AdvantageMode::Disc => {
                    let disc = state.disc.as_ref().ok_or_else(|| {
                        Error::Contract("discriminator rewards need a discriminator".into())
                    })?;
                    disc_rewards.push(pg_reward(disc, &m.x0, g.cond)?);
                }
                AdvantageMode::Static(sr) => static_rewards.push(sr.value(&m.x0)),
                AdvantageMode::Summed(sr) => {
                    let disc = state.disc.as_ref().ok_or_else(|| {
                        Error::Contract("discriminator rewards need a discriminator".into())
                    })?;
                    disc_rewards.push(pg_reward(disc, &m.x0, g.cond)?);
                    static_rewards.push(sr.value(&m.x0));
                }
            }
        }
        let advantages = match mode {
            AdvantageMode::Disc => grpo_advantages(&disc_rewards, cfg.adv_eps)?,
            AdvantageMode::Static(_) => grpo_advantages(&static_rewards, cfg.adv_eps)?,
            AdvantageMode::Summed(_) => {
                let a = grpo_advantages(&disc_rewards, cfg.adv_eps)?;
                let b = grpo_advantages(&static_rewards, cfg.adv_eps)?;
                a.iter().zip(&b).map(|(x, y)| x + y).collect()
            }
        };
        for (k, m) in g.members.iter_mut().enumerate() {
            m.reward = match mode {
                AdvantageMode::Disc => disc_rewards[k],
                AdvantageMode::Static(_) => static_rewards[k],
                AdvantageMode::Summed(_) => disc_rewards[k],
            };
            m.advantage = advantages[k];
            if !m.is_expert {
                if !disc_rewards.is_empty() {
                    disc_reward_acc += disc_rewards[k];
                }
                if !static_rewards.is_empty() {
                    static_reward_acc += static_rewards[k];
                }
                n_rollouts += 1;
            }
        }
    }
    if n_rollouts > 0 {
        match mode {
            AdvantageMode::Disc => reward_mean = Some(disc_reward_acc / n_rollouts as f64),
            AdvantageMode::Static(_) => {
                reward_static_mean = Some(static_reward_acc / n_rollouts as f64)
            }
            AdvantageMode::Summed(_) => {
                reward_mean = Some(disc_reward_acc / n_rollouts as f64);
                reward_static_mean = Some(static_reward_acc / n_rollouts as f64);
            }
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
        reward_mean,
        reward_static_mean,
        sigma_expert,
        sigma_policy,
        grad_norm_disc,
        ..StepMetrics::default()
    };

    // Policy phase, skipped during warmup.
    if !cfg.warmup.policy_frozen(state.step) {
        // Cache (t, ε) draws: common random numbers for every CFM estimate.
        for g in &mut groups {
            for m in &mut g.members {
                m.draws = (0..cfg.mc_pairs)
                    .map(|_| {
                        let t: f64 = rng_time.gen_range(0.0..1.0);
                        let eps: Vec<f64> =
                            (0..d).map(|_| rng_time.sample(StandardNormal)).collect();
                        (t, eps)
                    })
                    .collect();
            }
        }

        // θ_old ← θ_i; reference losses under common draws.
        let policy_old = state.policy.clone();
        let mut l_old: Vec<Vec<f64>> = Vec::with_capacity(groups.len());
        let mut l_ref: Vec<Vec<Option<f64>>> = Vec::with_capacity(groups.len());
        for g in &groups {
            let mut lo = Vec::with_capacity(g.members.len());
            let mut lr = Vec::with_capacity(g.members.len());
            for m in &g.members {
                lo.push(mc_cfm_value(&policy_old, &m.x0, g.cond, &m.draws)?);
                lr.push(if m.is_expert {
                    None
                } else {
                    Some(mc_cfm_value(&state.policy_ref, &m.x0, g.cond, &m.draws)?)
                });
            }
            l_old.push(lo);
            l_ref.push(lr);
        }

        for _epoch in 0..cfg.inner_epochs {
            let mut tape = Tape::new();
            let tvf = TapedVectorField::record(&mut tape, &state.policy);
            let mut fpo_terms = Vec::new();
            let mut kl_terms = Vec::new();
            let mut flags = 0u32;
            for (gi, g) in groups.iter().enumerate() {
                for (mi, m) in g.members.iter().enumerate() {
                    let l_new = mc_cfm_loss(&mut tape, &tvf, &m.x0, g.cond, &m.draws)?;
                    let (ratio, flagged) = fpo_ratio_node(&mut tape, l_old[gi][mi], l_new)?;
                    if flagged {
                        flags += 1;
                    }
                    fpo_terms.push(fpo_loss_node(&mut tape, ratio, m.advantage, cfg.clip_eps)?);
                    if let Some(lr) = l_ref[gi][mi] {
                        let lr_node = tape.constant_scalar(lr);
                        kl_terms.push(tape.sub(lr_node, l_new)?);
                    }
                }
            }
            let surrogate = tape.mean_of(&fpo_terms)?;
            let kl = tape.mean_of(&kl_terms)?;
            let neg_surrogate = tape.scale(surrogate, -1.0);
            let kl_pen = tape.scale(kl, cfg.beta_kl);
            let loss = tape.add(neg_surrogate, kl_pen)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(diverged(format!("non-finite surrogate: {loss_value}")));
            }
            let grads = tape.backward(loss)?;
            let mut g = tvf.grads(&tape, &grads);
            let norm = clip_global_norm(&mut g, cfg.grad_clip)?;
            let mut params: Vec<Tensor> = state.policy.flatten();
            adamw_step(&mut params, &g, &mut state.policy_opt)?;
            state.policy.assign(&params);

            metrics.gen_loss = Some(loss_value);
            metrics.kl = Some(tape.value(kl).item());
            metrics.grad_norm_policy = Some(norm);
            metrics.ratio_flags += flags;
        }
    }

    state.step += 1;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{DiscSpec, DiscVariant};
    use crate::diffcore::{param_fingerprint, AdamHyper, Activation, MlpParams};
    use rand::SeedableRng;

    fn small_policy(seed: u64) -> VectorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorField::init(2, &[8], Activation::Tanh, 1, 4, 4, &mut rng)
    }

    fn draws(seed: u64, n: usize, d: usize) -> Vec<(f64, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let t = rng.gen_range(0.0..1.0);
                let eps = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                (t, eps)
            })
            .collect()
    }

    #[test]
    fn ratio_is_exactly_one_at_the_old_parameters() {
        let policy = small_policy(3);
        let d = draws(7, 4, 2);
        let (r, flagged) = fpo_ratio_value(&policy, &policy, &[0.4, -0.2], 0, &d).unwrap();
        assert_eq!(r, 1.0);
        assert!(!flagged);
    }

    #[test]
    fn ratio_hand_case_and_monotonicity() {
        // L_old = 1.0, L_new = 0.5 → e^0.5
        let mut tape = Tape::new();
        let l_new = tape.constant_scalar(0.5);
        let (r, flagged) = fpo_ratio_node(&mut tape, 1.0, l_new).unwrap();
        assert!((tape.value(r).item() - 1.6487212707001282).abs() < 1e-15);
        assert!(!flagged);

        let policy = small_policy(3);
        let improved = small_policy(4);
        let d = draws(9, 4, 2);
        let x0 = [0.1, 0.6];
        let la = mc_cfm_value(&policy, &x0, 0, &d).unwrap();
        let lb = mc_cfm_value(&improved, &x0, 0, &d).unwrap();
        let (r, _) = fpo_ratio_value(&improved, &policy, &x0, 0, &d).unwrap();
        if lb < la {
            assert!(r > 1.0);
        } else {
            assert!(r <= 1.0);
        }
    }

    #[test]
    fn ratio_exponent_is_capped_and_flagged() {
        let mut tape = Tape::new();
        let l_new = tape.constant_scalar(-50.0);
        let (r, flagged) = fpo_ratio_node(&mut tape, 0.0, l_new).unwrap();
        assert!(flagged);
        assert!((tape.value(r).item() - RATIO_EXP_CAP.exp()).abs() < 1e-6);
    }

    #[test]
    fn fpo_loss_reference_cases() {
        assert_eq!(fpo_loss_value(1.5, 1.0, 0.2), 1.2);
        assert_eq!(fpo_loss_value(1.5, -1.0, 0.2), -1.5);
        assert_eq!(fpo_loss_value(1.0, 0.7325, 0.2), 0.7325);

        // taped version agrees
        let mut tape = Tape::new();
        let r = tape.constant_scalar(1.5);
        let l = fpo_loss_node(&mut tape, r, 1.0, 0.2).unwrap();
        assert_eq!(tape.value(l).item(), 1.2);
    }

    #[test]
    fn fpo_loss_is_a_lower_bound_of_both_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let ratio = rng.gen_range(0.01..3.0);
            let a = rng.gen_range(-2.0..2.0);
            let eps = rng.gen_range(0.05..0.5);
            let v = fpo_loss_value(ratio, a, eps);
            assert!(v <= ratio * a + 1e-15);
            assert!(v <= ratio.clamp(1.0 - eps, 1.0 + eps) * a + 1e-15);
        }
    }

    #[test]
    fn grpo_reference_cases() {
        let a = grpo_advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        assert!((a[0] + 1.224744871391589).abs() < 1e-12);
        assert!(a[1].abs() < 1e-12);
        assert!((a[2] - 1.224744871391589).abs() < 1e-12);

        assert_eq!(grpo_advantages(&[5.0, 5.0, 5.0], 1e-8).unwrap(), vec![0.0; 3]);
        assert!(grpo_advantages(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn grpo_outputs_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let rewards: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = grpo_advantages(&rewards, 1e-8).unwrap();
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / a.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_estimate_is_exactly_zero_against_itself() {
        let policy = small_policy(11);
        let samples = vec![(vec![0.3, -0.6], 0), (vec![-1.0, 0.4], 0)];
        let all_draws = vec![draws(1, 4, 2), draws(2, 4, 2)];
        let kl = kl_estimate_value(&policy, &policy, &samples, &all_draws).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn kl_estimate_hand_arithmetic_and_order_invariance() {
        // constant fields with known CFM losses: x0 = 0, eps = 0 → target 0,
        // so L(v) = v² per dimension
        let v_ref = VectorField::constant_field(1, &[0.8f64.sqrt()], 1);
        let v_new = VectorField::constant_field(1, &[0.3f64.sqrt()], 1);
        let samples = vec![(vec![0.0], 0)];
        let d = vec![vec![(0.5, vec![0.0])]];
        let kl = kl_estimate_value(&v_new, &v_ref, &samples, &d).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);

        let policy = small_policy(13);
        let reference = small_policy(14);
        let s1 = vec![(vec![0.2, 0.1], 0), (vec![-0.5, 0.9], 0)];
        let d1 = vec![draws(3, 3, 2), draws(4, 3, 2)];
        let k1 = kl_estimate_value(&policy, &reference, &s1, &d1).unwrap();
        let s2 = vec![s1[1].clone(), s1[0].clone()];
        let d2 = vec![d1[1].clone(), d1[0].clone()];
        let k2 = kl_estimate_value(&policy, &reference, &s2, &d2).unwrap();
        assert!((k1 - k2).abs() < 1e-12);
    }

    fn make_state(seed: u64, constant_disc: bool) -> PgState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = VectorField::init(2, &[8], Activation::Tanh, 1, 4, 4, &mut rng);
        let mut disc = Discriminator::init(2, 1, &DiscSpec::default(), None, &mut rng).unwrap();
        if constant_disc {
            disc.head = MlpParams::zeros(&[6, 4, 1], Activation::Relu);
            disc.spectral_norm = false;
            disc.spectral_state.u = vec![vec![1.0; 4], vec![1.0]];
        }
        let policy_opt = AdamState::new(&policy.flatten(), AdamHyper::with_lr(1e-3));
        let disc_opt = AdamState::new(&disc.flatten(), AdamHyper::with_lr(0.0));
        PgState {
            policy_ref: policy.clone(),
            policy_opt,
            policy,
            disc: Some(disc),
            disc_opt: Some(disc_opt),
            step: 0,
        }
    }

    fn tiny_batch() -> Vec<(Vec<f64>, usize)> {
        vec![(vec![1.0, 0.5], 0)]
    }

    #[test]
    fn warmup_freezes_the_policy_bitwise() {
        let mut state = make_state(21, false);
        let cfg = PgConfig {
            warmup: WarmupSchedule { warmup_steps: 2 },
            ..PgConfig::default()
        };
        let before = param_fingerprint(&state.policy.flatten());
        for step in 0..3 {
            let mut r1 = ChaCha8Rng::seed_from_u64(100 + step);
            let mut r2 = ChaCha8Rng::seed_from_u64(200 + step);
            pg_train_step(&mut state, &cfg, &tiny_batch(), &mut r1, &mut r2).unwrap();
            let now = param_fingerprint(&state.policy.flatten());
            if step < 2 {
                assert_eq!(now, before, "policy moved during warmup at step {step}");
            } else {
                assert_ne!(now, before, "policy did not move after warmup");
            }
        }
    }

    #[test]
    fn equal_rewards_make_the_update_pure_kl() {
        // Constant-logit discriminator (zero head, lr 0) → bitwise-equal
        // rewards → zero advantages. The surrogate contributes exactly zero
        // gradient, so the policy gradient equals the β·KL gradient alone.
        let state = make_state(33, true);
        let cfg = PgConfig {
            warmup: WarmupSchedule { warmup_steps: 0 },
            ..PgConfig::default()
        };
        let batch = tiny_batch();
        let d = state.policy.data_dim;
        let n_steps = cfg.n_euler_steps();

        // reproduce the engine's rollouts and draws
        let mut rng_rollout = ChaCha8Rng::seed_from_u64(1);
        let mut rng_time = ChaCha8Rng::seed_from_u64(2);
        let mut members: Vec<(Vec<f64>, bool)> = Vec::new();
        for _ in 0..cfg.group_size {
            let eps: Vec<f64> = (0..d).map(|_| rng_rollout.sample(StandardNormal)).collect();
            members.push((euler_sample(&state.policy, &eps, 0, n_steps).unwrap(), false));
        }
        members.push((batch[0].0.clone(), true));
        let all_draws: Vec<Vec<(f64, Vec<f64>)>> = members
            .iter()
            .map(|_| {
                (0..cfg.mc_pairs)
                    .map(|_| {
                        let t = rng_time.gen_range(0.0..1.0);
                        let eps = (0..d).map(|_| rng_time.sample(StandardNormal)).collect();
                        (t, eps)
                    })
                    .collect()
            })
            .collect();

        // full loss (zero advantages) vs KL-only loss: gradients match bitwise
        let grads_full = {
            let mut tape = Tape::new();
            let tvf = TapedVectorField::record(&mut tape, &state.policy);
            let mut fpo_terms = Vec::new();
            let mut kl_terms = Vec::new();
            for ((x0, is_expert), dr) in members.iter().zip(&all_draws) {
                let l_old = mc_cfm_value(&state.policy, x0, 0, dr).unwrap();
                let l_new = mc_cfm_loss(&mut tape, &tvf, x0, 0, dr).unwrap();
                let (ratio, _) = fpo_ratio_node(&mut tape, l_old, l_new).unwrap();
                fpo_terms.push(fpo_loss_node(&mut tape, ratio, 0.0, cfg.clip_eps).unwrap());
                if !is_expert {
                    let lr = mc_cfm_value(&state.policy_ref, x0, 0, dr).unwrap();
                    let lr_node = tape.constant_scalar(lr);
                    kl_terms.push(tape.sub(lr_node, l_new).unwrap());
                }
            }
            let s = tape.mean_of(&fpo_terms).unwrap();
            let kl = tape.mean_of(&kl_terms).unwrap();
            let ns = tape.scale(s, -1.0);
            let kp = tape.scale(kl, cfg.beta_kl);
            let loss = tape.add(ns, kp).unwrap();
            let g = tape.backward(loss).unwrap();
            tvf.grads(&tape, &g)
        };
        let grads_kl_only = {
            let mut tape = Tape::new();
            let tvf = TapedVectorField::record(&mut tape, &state.policy);
            let mut kl_terms = Vec::new();
            for ((x0, is_expert), dr) in members.iter().zip(&all_draws) {
                let l_new = mc_cfm_loss(&mut tape, &tvf, x0, 0, dr).unwrap();
                if !is_expert {
                    let lr = mc_cfm_value(&state.policy_ref, x0, 0, dr).unwrap();
                    let lr_node = tape.constant_scalar(lr);
                    kl_terms.push(tape.sub(lr_node, l_new).unwrap());
                }
            }
            let kl = tape.mean_of(&kl_terms).unwrap();
            let loss = tape.scale(kl, cfg.beta_kl);
            let g = tape.backward(loss).unwrap();
            tvf.grads(&tape, &g)
        };
        for (a, b) in grads_full.iter().zip(&grads_kl_only) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn engine_is_deterministic_given_seeds() {
        let run = || {
            let mut state = make_state(55, false);
            let cfg = PgConfig {
                warmup: WarmupSchedule { warmup_steps: 0 },
                ..PgConfig::default()
            };
            let mut out = Vec::new();
            for step in 0..3u64 {
                let mut r1 = ChaCha8Rng::seed_from_u64(1000 + step);
                let mut r2 = ChaCha8Rng::seed_from_u64(2000 + step);
                out.push(
                    pg_train_step(&mut state, &cfg, &tiny_batch(), &mut r1, &mut r2).unwrap(),
                );
            }
            (param_fingerprint(&state.policy.flatten()), out)
        };
        let (fp1, m1) = run();
        let (fp2, m2) = run();
        assert_eq!(fp1, fp2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn reference_policy_is_never_touched() {
        let mut state = make_state(77, false);
        let fp = param_fingerprint(&state.policy_ref.flatten());
        let cfg = PgConfig {
            warmup: WarmupSchedule { warmup_steps: 0 },
            inner_epochs: 2,
            ..PgConfig::default()
        };
        for step in 0..4u64 {
            let mut r1 = ChaCha8Rng::seed_from_u64(step);
            let mut r2 = ChaCha8Rng::seed_from_u64(90 + step);
            pg_train_step(&mut state, &cfg, &tiny_batch(), &mut r1, &mut r2).unwrap();
        }
        assert_eq!(fp, param_fingerprint(&state.policy_ref.flatten()));
    }

    #[test]
    fn group_size_one_is_rejected() {
        let cfg = PgConfig {
            group_size: 1,
            ..PgConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Contract(_))));
    }
}
