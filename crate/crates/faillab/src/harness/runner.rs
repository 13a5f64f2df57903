//! Run orchestration: builds models from a config, performs the BC cold
//! start, dispatches per-step training to the configured method, takes
//! metric snapshots and checkpoints at the evaluation cadence, and
//! persists everything under the run directory.
//!
//! Everything a run draws is keyed by `(seed, stream name, step)`, so a
//! run resumed from a checkpoint replays the exact tail of the
//! uninterrupted run.

use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::adversary::{DiscSpec, Discriminator};
use crate::baselines::{
    combined_pd_step, combined_pg_step, fpo_static_step, online_dpo_step, reward_gradient_step,
    sft_step, CombinedWeights,
};
use crate::diffcore::{AdamHyper, AdamState};
use crate::eval::{
    disc_probe_accuracy, energy_distance, mode_coverage, sample_conditioned_batch,
    sliced_wasserstein, MetricReport, TargetSpec, COLLAPSE_THRESHOLD,
};
use crate::fail_pd::{pd_train_step, PdConfig, PdState};
use crate::fail_pg::{pg_train_step, PgConfig, PgState};
use crate::flow::{euler_sample, VectorField};
use crate::harness::checkpoint::{self, Checkpoint};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::rng::{derive_seed, stream};
use crate::harness::runlog::{EvalRecord, RunHeader, RunLog, RunStatus, RunWriter, StepMetrics};
use crate::{Error, Result};

/// Result of a finished (or diverged) run.
pub struct RunOutcome {
    pub log: RunLog,
    pub final_state: Checkpoint,
}

enum TrainerState {
    Pd(PdState),
    Pg(PgState),
    Plain {
        policy: VectorField,
        policy_opt: AdamState,
        policy_ref: Option<VectorField>,
        step: u64,
    },
}

impl TrainerState {
    fn policy(&self) -> &VectorField {
        match self {
            TrainerState::Pd(s) => &s.policy,
            TrainerState::Pg(s) => &s.policy,
            TrainerState::Plain { policy, .. } => policy,
        }
    }

    fn disc(&self) -> Option<&Discriminator> {
        match self {
            TrainerState::Pd(s) => s.disc.as_ref(),
            TrainerState::Pg(s) => s.disc.as_ref(),
            TrainerState::Plain { .. } => None,
        }
    }

    fn to_checkpoint(&self, step: u64) -> Checkpoint {
        match self {
            TrainerState::Pd(s) => Checkpoint {
                step,
                policy: s.policy.clone(),
                policy_opt: s.policy_opt.clone(),
                policy_ref: None,
                disc: s.disc.clone(),
                disc_opt: s.disc_opt.clone(),
            },
            TrainerState::Pg(s) => Checkpoint {
                step,
                policy: s.policy.clone(),
                policy_opt: s.policy_opt.clone(),
                policy_ref: Some(s.policy_ref.clone()),
                disc: s.disc.clone(),
                disc_opt: s.disc_opt.clone(),
            },
            TrainerState::Plain {
                policy,
                policy_opt,
                policy_ref,
                ..
            } => Checkpoint {
                step,
                policy: policy.clone(),
                policy_opt: policy_opt.clone(),
                policy_ref: policy_ref.clone(),
                disc: None,
                disc_opt: None,
            },
        }
    }

    fn from_checkpoint(method: Method, ckpt: Checkpoint) -> Result<Self> {
        let step = ckpt.step;
        Ok(match method {
            Method::FailPd | Method::RewardGrad | Method::FailPdReward => {
                TrainerState::Pd(PdState {
                    policy: ckpt.policy,
                    policy_opt: ckpt.policy_opt,
                    disc: ckpt.disc,
                    disc_opt: ckpt.disc_opt,
                    step,
                })
            }
            Method::FailPg | Method::FpoStatic | Method::FailPgReward => {
                TrainerState::Pg(PgState {
                    policy: ckpt.policy,
                    policy_opt: ckpt.policy_opt,
                    policy_ref: ckpt.policy_ref.ok_or_else(|| {
                        Error::Contract("checkpoint lacks the reference policy".into())
                    })?,
                    disc: ckpt.disc,
                    disc_opt: ckpt.disc_opt,
                    step,
                })
            }
            Method::Sft | Method::OnlineDpo => TrainerState::Plain {
                policy: ckpt.policy,
                policy_opt: ckpt.policy_opt,
                policy_ref: ckpt.policy_ref,
                step,
            },
        })
    }
}

fn pd_config(cfg: &ExperimentConfig) -> PdConfig {
    PdConfig {
        group_size: cfg.train.group_size,
        delta_t: cfg.train.delta_t,
        lr_theta: cfg.optim.lr_policy,
        lr_omega: cfg.optim.lr_disc,
        bc_weight: cfg.train.bc_weight,
        bc_pretrain_steps: cfg.train.bc_pretrain_steps,
        total_steps: cfg.train.total_steps,
        warmup: crate::adversary::WarmupSchedule {
            warmup_steps: if cfg.method.uses_disc() {
                cfg.train.warmup_steps
            } else {
                0
            },
        },
        grad_clip: cfg.optim.grad_clip,
    }
}

fn pg_config(cfg: &ExperimentConfig) -> PgConfig {
    PgConfig {
        group_size: cfg.train.group_size,
        clip_eps: cfg.pg.clip_eps,
        inner_epochs: cfg.pg.inner_epochs,
        beta_kl: cfg.pg.beta_kl,
        adv_eps: cfg.pg.adv_eps,
        mc_pairs: cfg.pg.mc_pairs,
        delta_t: cfg.train.delta_t,
        warmup: crate::adversary::WarmupSchedule {
            warmup_steps: if cfg.method.uses_disc() {
                cfg.train.warmup_steps
            } else {
                0
            },
        },
        grad_clip: cfg.optim.grad_clip,
        total_steps: cfg.train.total_steps,
    }
}

fn adam_hyper(cfg: &ExperimentConfig, lr: f64) -> AdamHyper {
    AdamHyper {
        lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
        weight_decay: cfg.optim.weight_decay,
    }
}

/// Metric snapshot at `step`: policy pushforward vs the evaluation target.
pub fn evaluate(
    cfg: &ExperimentConfig,
    policy: &VectorField,
    disc: Option<&Discriminator>,
    step: u64,
) -> Result<MetricReport> {
    evaluate_against(cfg, policy, disc, cfg.eval_target(), step)
}

/// As [`evaluate`], against an explicit reference target.
pub fn evaluate_against(
    cfg: &ExperimentConfig,
    policy: &VectorField,
    disc: Option<&Discriminator>,
    target: &TargetSpec,
    step: u64,
) -> Result<MetricReport> {
    evaluate_raw(
        policy,
        disc,
        target,
        cfg.eval.sample_count,
        cfg.eval.n_proj,
        (1.0 / cfg.train.delta_t).round() as usize,
        cfg.seed,
        step,
    )
}

/// Evaluation with every knob explicit (used by the CLI `eval` command).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_raw(
    policy: &VectorField,
    disc: Option<&Discriminator>,
    target: &TargetSpec,
    n: usize,
    n_proj: usize,
    n_steps: usize,
    seed: u64,
    step: u64,
) -> Result<MetricReport> {
    let conds = target.conds();
    let d = policy.data_dim;

    let mut rng_pol = stream(seed, "eval/policy", step);
    let mut policy_pts: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for _ in 0..n {
        let cond = if conds == 1 {
            0
        } else {
            rng_pol.gen_range(0..conds)
        };
        let eps: Vec<f64> = (0..d).map(|_| rng_pol.sample(StandardNormal)).collect();
        let x0 = euler_sample(policy, &eps, cond, n_steps)?;
        policy_pts.push((x0, cond));
    }
    let mut rng_exp = stream(seed, "eval/expert", step);
    let expert_pts = sample_conditioned_batch(target, n, &mut rng_exp)?;

    let pol_cloud: Vec<Vec<f64>> = policy_pts.iter().map(|(p, _)| p.clone()).collect();
    let exp_cloud: Vec<Vec<f64>> = expert_pts.iter().map(|(p, _)| p.clone()).collect();
    let proj_seed = derive_seed(seed, "eval/proj", step);
    let sw = sliced_wasserstein(&pol_cloud, &exp_cloud, n_proj, proj_seed)?;

    // all-pairs energy distance on a capped subset
    let cap = 1024.min(n);
    let energy = energy_distance(&pol_cloud[..cap], &exp_cloud[..cap])?;

    let mut coverage = Vec::new();
    let mut collapse = false;
    for cond in 0..conds {
        let modes = target.modes(cond);
        if modes.is_empty() {
            continue;
        }
        let weights = target.mode_weights(cond);
        let cond_pts: Vec<Vec<f64>> = policy_pts
            .iter()
            .filter(|(_, c)| *c == cond)
            .map(|(p, _)| p.clone())
            .collect();
        if cond_pts.is_empty() {
            coverage.extend(std::iter::repeat(0.0).take(modes.len()));
            collapse = true;
            continue;
        }
        let frac = mode_coverage(&cond_pts, &modes)?;
        for (f, w) in frac.iter().zip(&weights) {
            if *w >= 0.05 && *f < COLLAPSE_THRESHOLD {
                collapse = true;
            }
        }
        coverage.extend(frac);
    }

    let probe = match disc {
        Some(disc) => Some(disc_probe_accuracy(disc, &expert_pts, &policy_pts)?),
        None => None,
    };

    Ok(MetricReport {
        sliced_wasserstein: sw,
        energy_distance: energy,
        mode_coverage: coverage,
        disc_probe_accuracy: probe,
        collapse,
        sample_count: n,
        seed: proj_seed,
    })
}

/// Run to completion, persisting logs and checkpoints under the resolved
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_inner(cfg, Some(cfg.resolved_out_dir()), None)
}

/// Run without touching the filesystem.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_inner(cfg, None, None)
}

/// Continue a run from a checkpoint (persisting when `persist` is set).
pub fn run_resumed(
    cfg: &ExperimentConfig,
    ckpt: Checkpoint,
    persist: bool,
) -> Result<RunOutcome> {
    let dir = persist.then(|| cfg.resolved_out_dir());
    run_inner(cfg, dir, Some(ckpt))
}

fn run_inner(
    cfg: &ExperimentConfig,
    persist: Option<PathBuf>,
    resume: Option<Checkpoint>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let header = RunHeader {
        method: cfg.method.name().to_string(),
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: toml::Value::try_from(cfg)
            .map_err(|e| Error::Contract(format!("config not serializable: {e}")))?,
    };
    let mut log = RunLog::new(header.clone());
    let mut writer = match &persist {
        Some(dir) => Some(RunWriter::create(dir, header)?),
        None => None,
    };

    let start_step;
    let mut state = match resume {
        Some(ckpt) => {
            start_step = ckpt.step;
            TrainerState::from_checkpoint(cfg.method, ckpt)?
        }
        None => {
            start_step = 0;
            build_initial_state(cfg)?
        }
    };

    let mut status = RunStatus::Completed;
    // snapshot at step 0 (post cold start) and at every cadence multiple
    if start_step == 0 {
        match snapshot(cfg, &state, 0, &mut log, &mut writer, &persist) {
            Ok(()) => {}
            Err(Error::Diverged { .. }) | Err(Error::Sampling { .. }) => {
                status = RunStatus::Diverged;
            }
            Err(e) => return Err(e),
        }
    }

    if status == RunStatus::Completed {
        for step in start_step..cfg.train.total_steps {
            match train_one_step(cfg, &mut state, step) {
                Ok(metrics) => {
                    log.push_step(metrics.clone());
                    if let Some(w) = writer.as_mut() {
                        w.write_step(&metrics)?;
                    }
                }
                Err(Error::Diverged { .. })
                | Err(Error::Sampling { .. })
                | Err(Error::NonFinite { .. }) => {
                    status = RunStatus::Diverged;
                    break;
                }
                Err(e) => return Err(e),
            }
            let done = step + 1;
            if done % cfg.eval.cadence == 0 || done == cfg.train.total_steps {
                match snapshot(cfg, &state, done, &mut log, &mut writer, &persist) {
                    Ok(()) => {}
                    Err(Error::Diverged { .. }) | Err(Error::Sampling { .. }) => {
                        status = RunStatus::Diverged;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }

    log.status = status;
    let final_state = state.to_checkpoint(current_step(&state));
    if let Some(w) = writer.take() {
        w.finish(status)?;
    }
    Ok(RunOutcome { log, final_state })
}

fn current_step(state: &TrainerState) -> u64 {
    match state {
        TrainerState::Pd(s) => s.step,
        TrainerState::Pg(s) => s.step,
        TrainerState::Plain { step, .. } => *step,
    }
}

fn snapshot(
    cfg: &ExperimentConfig,
    state: &TrainerState,
    step: u64,
    log: &mut RunLog,
    writer: &mut Option<RunWriter>,
    persist: &Option<PathBuf>,
) -> Result<()> {
    let report = evaluate(cfg, state.policy(), state.disc(), step)?;
    let record = EvalRecord { step, report };
    log.push_eval(record.clone());
    if let Some(w) = writer.as_mut() {
        w.write_eval(&record)?;
    }
    if let Some(dir) = persist {
        let path = dir.join("checkpoints").join(format!("step_{step:06}.json"));
        checkpoint::save(&path, &state.to_checkpoint(step))?;
    }
    Ok(())
}

fn build_initial_state(cfg: &ExperimentConfig) -> Result<TrainerState> {
    let d = cfg.target.dim();
    let conds = cfg.target.conds();
    let mut rng_init = stream(cfg.seed, "init/policy", 0);
    let mut policy = VectorField::init(
        d,
        &cfg.policy.hidden,
        cfg.policy.activation,
        conds,
        cfg.policy.emb_dim,
        cfg.policy.time_freqs,
        &mut rng_init,
    );
    let mut policy_opt = AdamState::new(&policy.flatten(), adam_hyper(cfg, cfg.optim.lr_policy));

    // BC cold start on the (possibly biased) BC target.
    for i in 0..cfg.train.bc_pretrain_steps {
        let mut rng_batch = stream(cfg.seed, "bc", i);
        let batch = sample_conditioned_batch(cfg.bc_target(), cfg.train.bc_batch, &mut rng_batch)?;
        let mut rng_time = stream(cfg.seed, "bc/time", i);
        sft_step(
            &mut policy,
            &mut policy_opt,
            &batch,
            cfg.optim.grad_clip,
            &mut rng_time,
        )?;
    }

    let disc = if cfg.method.uses_disc() {
        let spec = DiscSpec {
            variant: cfg.discriminator.variant,
            hidden: cfg.discriminator.hidden.clone(),
            activation: cfg.discriminator.activation,
            emb_dim: cfg.discriminator.emb_dim,
            spectral_norm: cfg.discriminator.spectral_norm,
            probe_t: cfg.discriminator.probe_t,
            frozen_feat_dim: cfg.discriminator.frozen_feat_dim,
        };
        let mut rng_disc = stream(cfg.seed, "init/disc", 0);
        Some(Discriminator::init(d, conds, &spec, Some(&policy), &mut rng_disc)?)
    } else {
        None
    };
    let disc_opt = disc
        .as_ref()
        .map(|dsc| AdamState::new(&dsc.flatten(), adam_hyper(cfg, cfg.optim.lr_disc)));

    Ok(match cfg.method {
        Method::FailPd | Method::RewardGrad | Method::FailPdReward => TrainerState::Pd(PdState {
            policy,
            policy_opt,
            disc,
            disc_opt,
            step: 0,
        }),
        Method::FailPg | Method::FpoStatic | Method::FailPgReward => TrainerState::Pg(PgState {
            policy_ref: policy.clone(),
            policy,
            policy_opt,
            disc,
            disc_opt,
            step: 0,
        }),
        Method::Sft => TrainerState::Plain {
            policy,
            policy_opt,
            policy_ref: None,
            step: 0,
        },
        Method::OnlineDpo => TrainerState::Plain {
            policy_ref: Some(policy.clone()),
            policy,
            policy_opt,
            step: 0,
        },
    })
}

fn train_one_step(
    cfg: &ExperimentConfig,
    state: &mut TrainerState,
    step: u64,
) -> Result<StepMetrics> {
    let mut rng_expert = stream(cfg.seed, "expert", step);
    let batch = sample_conditioned_batch(&cfg.target, cfg.train.prompts_per_step, &mut rng_expert)?;
    let mut rng_rollout = stream(cfg.seed, "rollout", step);
    let mut rng_time = stream(cfg.seed, "time", step);
    let reward = cfg.reward.as_ref().map(|r| r.to_reward());

    match (cfg.method, &mut *state) {
        (Method::FailPd, TrainerState::Pd(s)) => {
            pd_train_step(s, &pd_config(cfg), &batch, &mut rng_rollout, &mut rng_time)
        }
        (Method::RewardGrad, TrainerState::Pd(s)) => reward_gradient_step(
            s,
            &pd_config(cfg),
            reward.as_ref().expect("validated"),
            &batch,
            &mut rng_rollout,
            &mut rng_time,
        ),
        (Method::FailPdReward, TrainerState::Pd(s)) => {
            let r = cfg.reward.as_ref().expect("validated");
            combined_pd_step(
                s,
                &pd_config(cfg),
                &r.to_reward(),
                CombinedWeights {
                    fail: 1.0,
                    reward: r.weight,
                },
                &batch,
                &mut rng_rollout,
                &mut rng_time,
            )
        }
        (Method::FailPg, TrainerState::Pg(s)) => {
            pg_train_step(s, &pg_config(cfg), &batch, &mut rng_rollout, &mut rng_time)
        }
        (Method::FpoStatic, TrainerState::Pg(s)) => fpo_static_step(
            s,
            &pg_config(cfg),
            reward.as_ref().expect("validated"),
            &batch,
            &mut rng_rollout,
            &mut rng_time,
        ),
        (Method::FailPgReward, TrainerState::Pg(s)) => combined_pg_step(
            s,
            &pg_config(cfg),
            reward.as_ref().expect("validated"),
            &batch,
            &mut rng_rollout,
            &mut rng_time,
        ),
        (
            Method::Sft,
            TrainerState::Plain {
                policy,
                policy_opt,
                step: plain_step,
                ..
            },
        ) => {
            let loss = sft_step(policy, policy_opt, &batch, cfg.optim.grad_clip, &mut rng_time)?;
            *plain_step += 1;
            Ok(StepMetrics {
                step: step + 1,
                cfm_anchor: Some(loss),
                ..StepMetrics::default()
            })
        }
        (
            Method::OnlineDpo,
            TrainerState::Plain {
                policy,
                policy_opt,
                policy_ref,
                step: plain_step,
            },
        ) => {
            let n_steps = (1.0 / cfg.train.delta_t).round() as usize;
            let d = policy.data_dim;
            let mut rollouts = Vec::with_capacity(batch.len());
            for (_, cond) in &batch {
                let eps: Vec<f64> = (0..d).map(|_| rng_rollout.sample(StandardNormal)).collect();
                let x0 = euler_sample(policy, &eps, *cond, n_steps)
                    .map_err(|e| Error::Diverged {
                        step,
                        reason: format!("rollout failed: {e}"),
                    })?;
                rollouts.push((x0, *cond));
            }
            let loss = online_dpo_step(
                policy,
                policy_opt,
                policy_ref.as_ref().expect("dpo keeps a reference"),
                &batch,
                &rollouts,
                cfg.dpo.beta,
                cfg.pg.mc_pairs,
                cfg.optim.grad_clip,
                &mut rng_time,
            )?;
            *plain_step += 1;
            Ok(StepMetrics {
                step: step + 1,
                gen_loss: Some(loss),
                ..StepMetrics::default()
            })
        }
        _ => Err(Error::Contract(
            "trainer state does not match the configured method".into(),
        )),
    }
}
