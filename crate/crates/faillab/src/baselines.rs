//! Comparison methods sharing the same flow/diffcore plumbing: behavior
//! cloning (SFT), static-reward pathwise ascent, static-reward clipped
//! surrogate, online DPO with dynamically constructed preference pairs,
//! and the combined adversarial+reward trainers.
//!
//! Static rewards are analytic stand-ins for a frozen learned reward
//! model: differentiable everywhere, cheap, and easy to hack (norm_max in
//! particular rewards drifting away from any bounded expert distribution).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adamw_step, clip_global_norm, AdamState, NodeId, Tape, Tensor};
use crate::fail_pd::{pd_engine_step, PdConfig, PdObjective, PdState};
use crate::fail_pg::{mc_cfm_loss, mc_cfm_value, pg_engine_step, AdvantageMode, PgConfig, PgState};
use crate::flow::{cfm_loss, FlowSample, TapedVectorField, VectorField};
use crate::harness::runlog::StepMetrics;
use crate::{Error, Result};

/// Analytic reward family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticRewardKind {
    /// `-scale · mean((x - target)²)`: maximized at the target point.
    PointAttractor,
    /// `scale · mean(x²)`: unbounded, rewards escaping outward.
    NormMax,
    /// `scale · mean(x)`: rewards drifting along the diagonal.
    ComponentMean,
}

/// A differentiable hand-crafted reward over the data domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticReward {
    pub kind: StaticRewardKind,
    /// Attractor point; used by `point_attractor` only.
    #[serde(default)]
    pub target: Vec<f64>,
    pub scale: f64,
}

impl StaticReward {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self.kind {
            StaticRewardKind::PointAttractor => {
                let m = x
                    .iter()
                    .zip(&self.target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / x.len() as f64;
                -(self.scale * m)
            }
            StaticRewardKind::NormMax => {
                self.scale * (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
            }
            StaticRewardKind::ComponentMean => {
                self.scale * (x.iter().sum::<f64>() / x.len() as f64)
            }
        }
    }

    /// Reward as a scalar node, differentiable w.r.t. `x`.
    pub fn node(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self.kind {
            StaticRewardKind::PointAttractor => {
                let t = tape.constant_vector(self.target.clone());
                let d = tape.sub(x, t)?;
                let sq = tape.square(d);
                let m = tape.mean(sq);
                Ok(tape.scale(m, -self.scale))
            }
            StaticRewardKind::NormMax => {
                let sq = tape.square(x);
                let m = tape.mean(sq);
                Ok(tape.scale(m, self.scale))
            }
            StaticRewardKind::ComponentMean => {
                let m = tape.mean(x);
                Ok(tape.scale(m, self.scale))
            }
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.kind == StaticRewardKind::PointAttractor && self.target.len() != dim {
            return Err(Error::Shape {
                context: "point_attractor target",
                expected: format!("{dim} entries"),
                got: format!("{}", self.target.len()),
            });
        }
        if !self.scale.is_finite() || self.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("static reward parameters must be finite".into()));
        }
        Ok(())
    }
}

/// One AdamW step on the mean expert CFM loss with fresh (t, ε) draws.
/// This is behavior cloning; it also serves as the cold start for every
/// adversarial run. Returns the loss value.
pub fn sft_step(
    policy: &mut VectorField,
    opt: &mut AdamState,
    expert_batch: &[(Vec<f64>, usize)],
    grad_clip: f64,
    rng_time: &mut ChaCha8Rng,
) -> Result<f64> {
    if expert_batch.is_empty() {
        return Err(Error::Contract("sft_step requires an expert batch".into()));
    }
    let d = policy.data_dim;
    let mut tape = Tape::new();
    let tvf = TapedVectorField::record(&mut tape, policy);
    let mut terms = Vec::with_capacity(expert_batch.len());
    for (x_e, cond) in expert_batch {
        let t: f64 = rng_time.gen_range(0.0..1.0);
        let eps: Vec<f64> = (0..d).map(|_| rng_time.sample(StandardNormal)).collect();
        let sample = FlowSample::new(x_e.clone(), eps, t, *cond)?;
        terms.push(cfm_loss(&mut tape, &tvf, &sample)?);
    }
    let loss = tape.mean_of(&terms)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            what: "sft loss",
            index: 0,
        });
    }
    let grads = tape.backward(loss)?;
    let mut g = tvf.grads(&tape, &grads);
    clip_global_norm(&mut g, grad_clip)?;
    let mut params: Vec<Tensor> = policy.flatten();
    adamw_step(&mut params, &g, opt)?;
    policy.assign(&params);
    Ok(loss_value)
}

/// Pathwise ascent on `mean reward(single_step_denoise(...))`: the same
/// plumbing as the adversarial loop with the discriminator term replaced
/// by the negated reward (and no discriminator at all).
pub fn reward_gradient_step(
    state: &mut PdState,
    cfg: &PdConfig,
    reward: &StaticReward,
    expert_batch: &[(Vec<f64>, usize)],
    rng_rollout: &mut ChaCha8Rng,
    rng_time: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    pd_engine_step(
        state,
        cfg,
        expert_batch,
        PdObjective {
            fail_weight: 0.0,
            static_reward: Some((reward, 1.0)),
            update_disc: false,
        },
        rng_rollout,
        rng_time,
    )
}

/// The policy-gradient loop with the discriminator reward replaced by a
/// static reward; no discriminator updates.
pub fn fpo_static_step(
    state: &mut PgState,
    cfg: &PgConfig,
    reward: &StaticReward,
    expert_batch: &[(Vec<f64>, usize)],
    rng_rollout: &mut ChaCha8Rng,
    rng_time: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    pg_engine_step(
        state,
        cfg,
        expert_batch,
        AdvantageMode::Static(reward),
        false,
        rng_rollout,
        rng_time,
    )
}

/// Weights of the combined adversarial + static-reward pathwise objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CombinedWeights {
    pub fail: f64,
    pub reward: f64,
}

impl Default for CombinedWeights {
    fn default() -> Self {
        CombinedWeights {
            fail: 1.0,
            reward: 0.1,
        }
    }
}

/// Summed pathwise losses: `w_fail·(-log σ(D(x0'))) - w_r·reward(x0')`,
/// discriminator updated exactly as in the adversarial loop.
pub fn combined_pd_step(
    state: &mut PdState,
    cfg: &PdConfig,
    reward: &StaticReward,
    weights: CombinedWeights,
    expert_batch: &[(Vec<f64>, usize)],
    rng_rollout: &mut ChaCha8Rng,
    rng_time: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    pd_engine_step(
        state,
        cfg,
        expert_batch,
        PdObjective {
            fail_weight: weights.fail,
            static_reward: Some((reward, weights.reward)),
            update_disc: true,
        },
        rng_rollout,
        rng_time,
    )
}

/// Policy-gradient combination: discriminator and static rewards are
/// normalized into advantages separately per group, then summed.
pub fn combined_pg_step(
    state: &mut PgState,
    cfg: &PgConfig,
    reward: &StaticReward,
    expert_batch: &[(Vec<f64>, usize)],
    rng_rollout: &mut ChaCha8Rng,
    rng_time: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    pg_engine_step(
        state,
        cfg,
        expert_batch,
        AdvantageMode::Summed(reward),
        true,
        rng_rollout,
        rng_time,
    )
}

/// Default preference-strength coefficient for online DPO.
pub const DPO_BETA_DEFAULT: f64 = 1.0;

/// DPO loss from the four CFM losses of a preference pair:
/// `-log σ(β·[(L(ref,x_w) - L(θ,x_w)) - (L(ref,x_l) - L(θ,x_l))])`.
pub fn dpo_loss_from_losses(
    l_ref_w: f64,
    l_w: f64,
    l_ref_l: f64,
    l_l: f64,
    beta: f64,
) -> f64 {
    let z = beta * ((l_ref_w - l_w) - (l_ref_l - l_l));
    -crate::diffcore::log_sigmoid(z)
}

/// One online-DPO update from dynamically constructed preference pairs:
/// the expert sample is chosen, the matching policy rollout is rejected.
/// Likelihood differences come from the CFM-loss ELBO proxy under common
/// (t, ε) draws per sample. Returns the mean pair loss.
pub fn online_dpo_step(
    policy: &mut VectorField,
    opt: &mut AdamState,
    policy_ref: &VectorField,
    expert_batch: &[(Vec<f64>, usize)],
    rollout_batch: &[(Vec<f64>, usize)],
    beta_dpo: f64,
    mc_pairs: usize,
    grad_clip: f64,
    rng_time: &mut ChaCha8Rng,
) -> Result<f64> {
    if expert_batch.is_empty() || expert_batch.len() != rollout_batch.len() {
        return Err(Error::Contract(
            "online_dpo_step pairs expert and rollout batches of equal length".into(),
        ));
    }
    for ((_, cw), (_, cl)) in expert_batch.iter().zip(rollout_batch) {
        if cw != cl {
            return Err(Error::Contract(
                "preference pairs must share conditioning".into(),
            ));
        }
    }
    let d = policy.data_dim;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<(f64, Vec<f64>)> {
        (0..mc_pairs)
            .map(|_| {
                let t = rng.gen_range(0.0..1.0);
                let eps = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                (t, eps)
            })
            .collect()
    };

    let mut tape = Tape::new();
    let tvf = TapedVectorField::record(&mut tape, policy);
    let mut terms = Vec::with_capacity(expert_batch.len());
    for ((x_w, cond), (x_l, _)) in expert_batch.iter().zip(rollout_batch) {
        let draws_w = draw(rng_time);
        let draws_l = draw(rng_time);
        let l_ref_w = mc_cfm_value(policy_ref, x_w, *cond, &draws_w)?;
        let l_ref_l = mc_cfm_value(policy_ref, x_l, *cond, &draws_l)?;
        let l_w = mc_cfm_loss(&mut tape, &tvf, x_w, *cond, &draws_w)?;
        let l_l = mc_cfm_loss(&mut tape, &tvf, x_l, *cond, &draws_l)?;
        let ref_w = tape.constant_scalar(l_ref_w);
        let ref_l = tape.constant_scalar(l_ref_l);
        let adv_w = tape.sub(ref_w, l_w)?;
        let adv_l = tape.sub(ref_l, l_l)?;
        let bracket = tape.sub(adv_w, adv_l)?;
        let scaled = tape.scale(bracket, beta_dpo);
        let ls = tape.log_sigmoid(scaled);
        terms.push(tape.scale(ls, -1.0));
    }
    let loss = tape.mean_of(&terms)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            what: "dpo loss",
            index: 0,
        });
    }
    let grads = tape.backward(loss)?;
    let mut g = tvf.grads(&tape, &grads);
    clip_global_norm(&mut g, grad_clip)?;
    let mut params: Vec<Tensor> = policy.flatten();
    adamw_step(&mut params, &g, opt)?;
    policy.assign(&params);
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{DiscSpec, Discriminator, WarmupSchedule};
    use crate::diffcore::{param_fingerprint, AdamHyper, Activation, MlpParams};
    use crate::flow::euler_sample;
    use rand::SeedableRng;

    fn policy(seed: u64, d: usize) -> VectorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorField::init(d, &[16], Activation::Tanh, 1, 4, 4, &mut rng)
    }

    #[test]
    fn sft_zero_learning_rate_is_identity() {
        let mut p = policy(1, 1);
        let mut opt = AdamState::new(&p.flatten(), AdamHyper::with_lr(0.0));
        let before = param_fingerprint(&p.flatten());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        sft_step(&mut p, &mut opt, &[(vec![0.5], 0)], 1.0, &mut rng).unwrap();
        assert_eq!(before, param_fingerprint(&p.flatten()));
    }

    #[test]
    fn sft_loss_decreases_on_a_fixed_batch() {
        let mut p = policy(3, 1);
        let mut opt = AdamState::new(&p.flatten(), AdamHyper::with_lr(3e-3));
        let batch = vec![(vec![0.8], 0), (vec![-0.3], 0)];
        let mut first = None;
        let mut last = 0.0;
        for step in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(step);
            last = sft_step(&mut p, &mut opt, &batch, 1.0, &mut rng).unwrap();
            first.get_or_insert(last);
        }
        assert!(
            last < first.unwrap(),
            "descent sanity: {last} !< {:?}",
            first
        );
    }

    #[test]
    fn sft_concentrates_on_a_point_mass() {
        // expert = point mass at 0 (d=1); after training, 95% of samples
        // land within 0.1 of it
        let mut p = {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            VectorField::init(1, &[32, 32], Activation::Tanh, 1, 4, 4, &mut rng)
        };
        let mut opt = AdamState::new(&p.flatten(), AdamHyper::with_lr(3e-3));
        let batch = vec![(vec![0.0], 0); 32];
        for step in 0..2500u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(step);
            sft_step(&mut p, &mut opt, &batch, 1.0, &mut rng).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut hits = 0;
        let n = 200;
        for _ in 0..n {
            let eps = vec![rng.sample(StandardNormal)];
            let x = euler_sample(&p, &eps, 0, 28).unwrap();
            if x[0].abs() < 0.1 {
                hits += 1;
            }
        }
        assert!(
            hits as f64 / n as f64 >= 0.95,
            "only {hits}/{n} samples near the point mass"
        );
    }

    #[test]
    fn static_reward_values_and_nodes_agree() {
        let rewards = [
            StaticReward {
                kind: StaticRewardKind::PointAttractor,
                target: vec![1.0, -1.0],
                scale: 0.7,
            },
            StaticReward {
                kind: StaticRewardKind::NormMax,
                target: vec![],
                scale: 1.3,
            },
            StaticReward {
                kind: StaticRewardKind::ComponentMean,
                target: vec![],
                scale: -0.4,
            },
        ];
        let x = vec![0.3, 2.0];
        for r in &rewards {
            let mut tape = Tape::new();
            let xn = tape.constant_vector(x.clone());
            let node = r.node(&mut tape, xn).unwrap();
            assert_eq!(tape.value(node).item(), r.value(&x), "{:?}", r.kind);
        }
    }

    #[test]
    fn constant_reward_gives_zero_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = VectorField::init(2, &[8], Activation::Tanh, 1, 4, 4, &mut rng);
        let mut state = PdState {
            policy_opt: AdamState::new(&p.flatten(), AdamHyper::with_lr(1e-3)),
            policy: p,
            disc: None,
            disc_opt: None,
            step: 0,
        };
        let cfg = PdConfig {
            bc_weight: 0.0,
            warmup: WarmupSchedule { warmup_steps: 0 },
            ..PdConfig::default()
        };
        let reward = StaticReward {
            kind: StaticRewardKind::PointAttractor,
            target: vec![0.0, 0.0],
            scale: 0.0,
        };
        let before = param_fingerprint(&state.policy.flatten());
        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        reward_gradient_step(&mut state, &cfg, &reward, &[(vec![1.0, 1.0], 0)], &mut r1, &mut r2)
            .unwrap();
        assert_eq!(before, param_fingerprint(&state.policy.flatten()));
    }

    #[test]
    fn combined_pd_with_zero_reward_weight_matches_fail_pd_bitwise() {
        let run = |combined: bool| {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let p = VectorField::init(2, &[8], Activation::Tanh, 1, 4, 4, &mut rng);
            let d = Discriminator::init(2, 1, &DiscSpec::default(), None, &mut rng).unwrap();
            let mut state = PdState {
                policy_opt: AdamState::new(&p.flatten(), AdamHyper::with_lr(1e-3)),
                policy: p,
                disc_opt: Some(AdamState::new(&d.flatten(), AdamHyper::with_lr(1e-3))),
                disc: Some(d),
                step: 0,
            };
            let cfg = PdConfig {
                warmup: WarmupSchedule { warmup_steps: 0 },
                ..PdConfig::default()
            };
            let reward = StaticReward {
                kind: StaticRewardKind::NormMax,
                target: vec![],
                scale: 1.0,
            };
            let batch = vec![(vec![1.5, -0.5], 0)];
            for step in 0..2u64 {
                let mut r1 = ChaCha8Rng::seed_from_u64(100 + step);
                let mut r2 = ChaCha8Rng::seed_from_u64(200 + step);
                if combined {
                    combined_pd_step(
                        &mut state,
                        &cfg,
                        &reward,
                        CombinedWeights {
                            fail: 1.0,
                            reward: 0.0,
                        },
                        &batch,
                        &mut r1,
                        &mut r2,
                    )
                    .unwrap();
                } else {
                    crate::fail_pd::pd_train_step(&mut state, &cfg, &batch, &mut r1, &mut r2)
                        .unwrap();
                }
            }
            param_fingerprint(&state.policy.flatten())
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn combined_pd_with_zero_fail_weight_matches_reward_gradient_on_theta() {
        let batch = vec![(vec![1.5, -0.5], 0)];
        let reward = StaticReward {
            kind: StaticRewardKind::NormMax,
            target: vec![],
            scale: 1.0,
        };
        let cfg = PdConfig {
            bc_weight: 0.0,
            warmup: WarmupSchedule { warmup_steps: 0 },
            ..PdConfig::default()
        };
        let make_policy = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            VectorField::init(2, &[8], Activation::Tanh, 1, 4, 4, &mut rng)
        };

        // combined with fail weight 0 (disc present and updating)
        let p = make_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d = Discriminator::init(2, 1, &DiscSpec::default(), None, &mut rng).unwrap();
        let mut state_a = PdState {
            policy_opt: AdamState::new(&p.flatten(), AdamHyper::with_lr(1e-3)),
            policy: p,
            disc_opt: Some(AdamState::new(&d.flatten(), AdamHyper::with_lr(1e-3))),
            disc: Some(d),
            step: 0,
        };
        // standalone reward gradient (no discriminator at all)
        let p = make_policy();
        let mut state_b = PdState {
            policy_opt: AdamState::new(&p.flatten(), AdamHyper::with_lr(1e-3)),
            policy: p,
            disc: None,
            disc_opt: None,
            step: 0,
        };
        for step in 0..2u64 {
            let mut r1 = ChaCha8Rng::seed_from_u64(300 + step);
            let mut r2 = ChaCha8Rng::seed_from_u64(400 + step);
            combined_pd_step(
                &mut state_a,
                &cfg,
                &reward,
                CombinedWeights {
                    fail: 0.0,
                    reward: 1.0,
                },
                &batch,
                &mut r1,
                &mut r2,
            )
            .unwrap();
            let mut r1 = ChaCha8Rng::seed_from_u64(300 + step);
            let mut r2 = ChaCha8Rng::seed_from_u64(400 + step);
            reward_gradient_step(&mut state_b, &cfg, &reward, &batch, &mut r1, &mut r2).unwrap();
        }
        assert_eq!(
            param_fingerprint(&state_a.policy.flatten()),
            param_fingerprint(&state_b.policy.flatten())
        );
    }

    fn frozen_flat_disc_state(seed: u64, with_disc: bool) -> PgState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = VectorField::init(2, &[8], Activation::Tanh, 1, 4, 4, &mut rng);
        let (disc, disc_opt) = if with_disc {
            let mut d = Discriminator::init(2, 1, &DiscSpec::default(), None, &mut rng).unwrap();
            d.head = MlpParams::zeros(&[6, 4, 1], Activation::Relu);
            d.spectral_norm = false;
            d.spectral_state.u = vec![vec![1.0; 4], vec![1.0]];
            let opt = AdamState::new(&d.flatten(), AdamHyper::with_lr(0.0));
            (Some(d), Some(opt))
        } else {
            (None, None)
        };
        PgState {
            policy_ref: p.clone(),
            policy_opt: AdamState::new(&p.flatten(), AdamHyper::with_lr(1e-3)),
            policy: p,
            disc,
            disc_opt,
            step: 0,
        }
    }

    #[test]
    fn combined_pg_reduces_to_fail_pg_when_static_reward_is_constant() {
        let batch = vec![(vec![1.0, 0.5], 0)];
        let cfg = PgConfig {
            warmup: WarmupSchedule { warmup_steps: 0 },
            ..PgConfig::default()
        };
        let constant = StaticReward {
            kind: StaticRewardKind::PointAttractor,
            target: vec![0.0, 0.0],
            scale: 0.0,
        };
        // identical live discriminators on both sides
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let p = VectorField::init(2, &[8], Activation::Tanh, 1, 4, 4, &mut rng);
            let d = Discriminator::init(2, 1, &DiscSpec::default(), None, &mut rng).unwrap();
            PgState {
                policy_ref: p.clone(),
                policy_opt: AdamState::new(&p.flatten(), AdamHyper::with_lr(1e-3)),
                policy: p,
                disc_opt: Some(AdamState::new(&d.flatten(), AdamHyper::with_lr(1e-3))),
                disc: Some(d),
                step: 0,
            }
        };
        let mut a = make();
        let mut b = make();
        for step in 0..2u64 {
            let mut r1 = ChaCha8Rng::seed_from_u64(step);
            let mut r2 = ChaCha8Rng::seed_from_u64(60 + step);
            combined_pg_step(&mut a, &cfg, &constant, &batch, &mut r1, &mut r2).unwrap();
            let mut r1 = ChaCha8Rng::seed_from_u64(step);
            let mut r2 = ChaCha8Rng::seed_from_u64(60 + step);
            crate::fail_pg::pg_train_step(&mut b, &cfg, &batch, &mut r1, &mut r2).unwrap();
        }
        assert_eq!(
            param_fingerprint(&a.policy.flatten()),
            param_fingerprint(&b.policy.flatten())
        );
    }

    #[test]
    fn combined_pg_reduces_to_fpo_static_when_disc_is_flat() {
        let batch = vec![(vec![1.0, 0.5], 0)];
        let cfg = PgConfig {
            warmup: WarmupSchedule { warmup_steps: 0 },
            ..PgConfig::default()
        };
        let reward = StaticReward {
            kind: StaticRewardKind::NormMax,
            target: vec![],
            scale: 1.0,
        };
        let mut a = frozen_flat_disc_state(13, true); // flat frozen disc
        let mut b = frozen_flat_disc_state(13, false); // no disc
        for step in 0..2u64 {
            let mut r1 = ChaCha8Rng::seed_from_u64(step);
            let mut r2 = ChaCha8Rng::seed_from_u64(70 + step);
            combined_pg_step(&mut a, &cfg, &reward, &batch, &mut r1, &mut r2).unwrap();
            let mut r1 = ChaCha8Rng::seed_from_u64(step);
            let mut r2 = ChaCha8Rng::seed_from_u64(70 + step);
            fpo_static_step(&mut b, &cfg, &reward, &batch, &mut r1, &mut r2).unwrap();
        }
        assert_eq!(
            param_fingerprint(&a.policy.flatten()),
            param_fingerprint(&b.policy.flatten())
        );
    }

    #[test]
    fn summed_advantages_do_center() {
        use crate::fail_pg::grpo_advantages;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let r1: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..3.0)).collect();
            let r2: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a1 = grpo_advantages(&r1, 1e-8).unwrap();
            let a2 = grpo_advantages(&r2, 1e-8).unwrap();
            let summed: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
            assert!(summed.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn dpo_identity_point_costs_ln_two() {
        let p = policy(21, 1);
        let mut opt = AdamState::new(&p.flatten(), AdamHyper::with_lr(1e-3));
        let mut policy_live = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let loss = online_dpo_step(
            &mut policy_live,
            &mut opt,
            &p,
            &[(vec![0.4], 0)],
            &[(vec![-0.7], 0)],
            DPO_BETA_DEFAULT,
            4,
            1.0,
            &mut rng,
        )
        .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dpo_loss_is_monotone_in_the_chosen_cfm_loss() {
        // lowering L_CFM(θ, x_w) with all else fixed strictly lowers the loss
        let base = dpo_loss_from_losses(0.9, 0.6, 1.1, 0.7, 1.0);
        let better = dpo_loss_from_losses(0.9, 0.5, 1.1, 0.7, 1.0);
        assert!(better < base);
    }

    #[test]
    fn dpo_per_term_gradient_signs_match_the_perfect_discriminator_reading() {
        // expert terms pushed up (∂loss/∂l_w > 0), rollout terms down
        let h = 1e-6;
        let at = |lw: f64, ll: f64| dpo_loss_from_losses(0.9, lw, 1.1, ll, 1.0);
        let d_lw = (at(0.6 + h, 0.7) - at(0.6 - h, 0.7)) / (2.0 * h);
        let d_ll = (at(0.6, 0.7 + h) - at(0.6, 0.7 - h)) / (2.0 * h);
        assert!(d_lw > 0.0, "chosen-sample gradient must be positive");
        assert!(d_ll < 0.0, "rejected-sample gradient must be negative");
    }

    #[test]
    fn dpo_rejects_mismatched_conditioning() {
        let p = policy(22, 1);
        let mut opt = AdamState::new(&p.flatten(), AdamHyper::with_lr(1e-3));
        let mut live = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p_ref = p.clone();
        let err = online_dpo_step(
            &mut live,
            &mut opt,
            &p_ref,
            &[(vec![0.4], 0)],
            &[(vec![-0.7], 1)],
            1.0,
            2,
            1.0,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
