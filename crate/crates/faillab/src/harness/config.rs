//! Experiment configuration: a flat, human-editable TOML file with one
//! section per subsystem. Unknown keys are rejected; every field has a
//! documented default so a minimal file needs only `method`, `seed`, and
//! a `[target]` table. The resolved config round-trips through
//! serialization unchanged.
//!
//! `FAILLAB_OUT_DIR`, when set, replaces the parent of the configured
//! output directory (the final path component is kept).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::DiscVariant;
use crate::baselines::{StaticReward, StaticRewardKind};
use crate::diffcore::Activation;
use crate::eval::TargetSpec;

/// Environment variable overriding the output-directory parent.
pub const OUT_DIR_ENV: &str = "FAILLAB_OUT_DIR";

/// Configuration errors, one class per failure mode.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    Missing(PathBuf),
    #[error("config could not be read: {0}")]
    Unreadable(String),
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("invalid config value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

/// Training method selector; these names are the CLI/config contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sft")]
    Sft,
    #[serde(rename = "reward_grad")]
    RewardGrad,
    #[serde(rename = "fpo_static")]
    FpoStatic,
    #[serde(rename = "online_dpo")]
    OnlineDpo,
    #[serde(rename = "fail_pd")]
    FailPd,
    #[serde(rename = "fail_pg")]
    FailPg,
    #[serde(rename = "fail_pd+reward")]
    FailPdReward,
    #[serde(rename = "fail_pg+reward")]
    FailPgReward,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::RewardGrad => "reward_grad",
            Method::FpoStatic => "fpo_static",
            Method::OnlineDpo => "online_dpo",
            Method::FailPd => "fail_pd",
            Method::FailPg => "fail_pg",
            Method::FailPdReward => "fail_pd+reward",
            Method::FailPgReward => "fail_pg+reward",
        }
    }

    /// Methods that train a discriminator.
    pub fn uses_disc(&self) -> bool {
        matches!(
            self,
            Method::FailPd | Method::FailPg | Method::FailPdReward | Method::FailPgReward
        )
    }

    /// Methods driven by a static analytic reward.
    pub fn uses_static_reward(&self) -> bool {
        matches!(
            self,
            Method::RewardGrad | Method::FpoStatic | Method::FailPdReward | Method::FailPgReward
        )
    }

    /// Methods running the group-based policy-gradient loop.
    pub fn is_pg(&self) -> bool {
        matches!(self, Method::FailPg | Method::FpoStatic | Method::FailPgReward)
    }

    /// Methods that keep a frozen reference policy.
    pub fn uses_reference(&self) -> bool {
        self.is_pg() || matches!(self, Method::OnlineDpo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub emb_dim: usize,
    pub time_freqs: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: vec![48, 48],
            activation: Activation::Tanh,
            emb_dim: 4,
            time_freqs: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    pub variant: DiscVariant,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub emb_dim: usize,
    pub spectral_norm: bool,
    pub probe_t: f64,
    pub frozen_feat_dim: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            variant: DiscVariant::Scratch,
            hidden: vec![32, 32],
            activation: Activation::Relu,
            emb_dim: 4,
            spectral_norm: true,
            probe_t: 0.5,
            frozen_feat_dim: 32,
        }
    }
}

/// AdamW hyperparameters shared by both players, with independent
/// learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_policy: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_policy: 1e-3,
            lr_disc: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub bc_pretrain_steps: u64,
    /// Policy freeze length for adversarial methods; ignored by methods
    /// without a discriminator.
    pub warmup_steps: u64,
    /// Rollouts per conditioning instance (G).
    pub group_size: usize,
    /// Inference/denoise step size; rollouts take round(1/Δt) Euler steps.
    pub delta_t: f64,
    /// Conditioning instances (prompts) per training step.
    pub prompts_per_step: usize,
    /// Expert batch size during BC pretraining.
    pub bc_batch: usize,
    /// Weight λ of the expert CFM anchor in pathwise methods.
    pub bc_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1000,
            bc_pretrain_steps: 300,
            warmup_steps: 25,
            group_size: 3,
            delta_t: 1.0 / 28.0,
            prompts_per_step: 16,
            bc_batch: 64,
            bc_weight: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgSection {
    pub clip_eps: f64,
    pub inner_epochs: usize,
    pub beta_kl: f64,
    pub adv_eps: f64,
    pub mc_pairs: usize,
}

impl Default for PgSection {
    fn default() -> Self {
        PgSection {
            clip_eps: 0.2,
            inner_epochs: 1,
            beta_kl: 0.05,
            adv_eps: 1e-8,
            mc_pairs: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoSection {
    pub beta: f64,
}

impl Default for DpoSection {
    fn default() -> Self {
        DpoSection { beta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub kind: StaticRewardKind,
    #[serde(default)]
    pub target: Vec<f64>,
    #[serde(default = "one")]
    pub scale: f64,
    /// w_r in the combined pathwise objective.
    #[serde(default = "default_reward_weight")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn default_reward_weight() -> f64 {
    0.1
}

impl RewardSection {
    pub fn to_reward(&self) -> StaticReward {
        StaticReward {
            kind: self.kind,
            target: self.target.clone(),
            scale: self.scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Steps between metric snapshots (and checkpoints).
    pub cadence: u64,
    pub sample_count: usize,
    pub n_proj: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cadence: 100,
            sample_count: 2048,
            n_proj: 128,
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub target: TargetSpec,
    /// BC pretraining target; defaults to `target`.
    #[serde(default)]
    pub bc_target: Option<TargetSpec>,
    /// Evaluation reference target; defaults to `target`.
    #[serde(default)]
    pub eval_target: Option<TargetSpec>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub discriminator: DiscConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pg: PgSection,
    #[serde(default)]
    pub dpo: DpoSection,
    #[serde(default)]
    pub reward: Option<RewardSection>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn bc_target(&self) -> &TargetSpec {
        self.bc_target.as_ref().unwrap_or(&self.target)
    }

    pub fn eval_target(&self) -> &TargetSpec {
        self.eval_target.as_ref().unwrap_or(&self.target)
    }

    /// Output directory after defaulting and environment override.
    pub fn resolved_out_dir(&self) -> PathBuf {
        let configured = self
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}_{}", self.method.name(), self.seed)));
        match std::env::var_os(OUT_DIR_ENV) {
            Some(base) => {
                let leaf = configured
                    .file_name()
                    .map(|s| s.to_owned())
                    .unwrap_or_else(|| "run".into());
                PathBuf::from(base).join(leaf)
            }
            None => configured,
        }
    }

    fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Full validation: every invariant checked before any computation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let as_invalid = |key: &str, e: crate::Error| Self::invalid(key, e.to_string());
        self.target.validate().map_err(|e| as_invalid("target", e))?;
        if let Some(t) = &self.bc_target {
            t.validate().map_err(|e| as_invalid("bc_target", e))?;
            if t.dim() != self.target.dim() || t.conds() != self.target.conds() {
                return Err(Self::invalid(
                    "bc_target",
                    "dimension/conditioning arity must match target",
                ));
            }
        }
        if let Some(t) = &self.eval_target {
            t.validate().map_err(|e| as_invalid("eval_target", e))?;
            if t.dim() != self.target.dim() || t.conds() != self.target.conds() {
                return Err(Self::invalid(
                    "eval_target",
                    "dimension/conditioning arity must match target",
                ));
            }
        }
        if self.policy.hidden.is_empty() || self.policy.hidden.iter().any(|&h| h == 0) {
            return Err(Self::invalid("policy.hidden", "needs non-empty positive widths"));
        }
        if self.policy.emb_dim == 0 || self.policy.time_freqs == 0 {
            return Err(Self::invalid("policy", "emb_dim and time_freqs must be >= 1"));
        }
        if self.discriminator.hidden.is_empty() {
            return Err(Self::invalid("discriminator.hidden", "needs at least one layer"));
        }
        if !(0.0 < self.discriminator.probe_t && self.discriminator.probe_t < 1.0) {
            return Err(Self::invalid("discriminator.probe_t", "must lie in (0,1)"));
        }
        if self.optim.lr_policy <= 0.0 || self.optim.lr_disc <= 0.0 {
            return Err(Self::invalid("optim", "learning rates must be > 0"));
        }
        if self.optim.grad_clip <= 0.0 {
            return Err(Self::invalid("optim.grad_clip", "must be > 0"));
        }
        if !(0.0 < self.train.delta_t && self.train.delta_t <= 0.5) {
            return Err(Self::invalid("train.delta_t", "must lie in (0, 0.5]"));
        }
        if self.train.group_size == 0 || self.train.prompts_per_step == 0 {
            return Err(Self::invalid(
                "train",
                "group_size and prompts_per_step must be >= 1",
            ));
        }
        if self.train.bc_weight < 0.0 {
            return Err(Self::invalid("train.bc_weight", "must be >= 0"));
        }
        if self.train.bc_batch == 0 {
            return Err(Self::invalid("train.bc_batch", "must be >= 1"));
        }
        if self.method.is_pg() && self.train.group_size < 2 {
            return Err(Self::invalid(
                "train.group_size",
                "policy-gradient methods need G >= 2 (group advantage std is undefined for G=1)",
            ));
        }
        if !(0.0 < self.pg.clip_eps && self.pg.clip_eps < 1.0) {
            return Err(Self::invalid("pg.clip_eps", "must lie in (0,1)"));
        }
        if self.pg.beta_kl < 0.0 {
            return Err(Self::invalid("pg.beta_kl", "must be >= 0"));
        }
        if self.pg.inner_epochs == 0 || self.pg.mc_pairs == 0 {
            return Err(Self::invalid("pg", "inner_epochs and mc_pairs must be >= 1"));
        }
        if self.eval.cadence == 0 {
            return Err(Self::invalid("eval.cadence", "must be >= 1"));
        }
        if self.eval.sample_count < 2 || self.eval.n_proj == 0 {
            return Err(Self::invalid("eval", "sample_count >= 2 and n_proj >= 1"));
        }
        match (&self.reward, self.method.uses_static_reward()) {
            (None, true) => {
                return Err(Self::invalid(
                    "reward",
                    format!("method `{}` needs a [reward] section", self.method.name()),
                ))
            }
            (Some(r), _) => {
                r.to_reward()
                    .validate(self.target.dim())
                    .map_err(|e| as_invalid("reward", e))?;
                if r.weight < 0.0 {
                    return Err(Self::invalid("reward.weight", "must be >= 0"));
                }
            }
            (None, false) => {}
        }
        Ok(())
    }
}

fn classify_toml_error(msg: String) -> ConfigError {
    if msg.contains("unknown field") || msg.contains("unknown variant") {
        ConfigError::UnknownKey(msg)
    } else if msg.contains("missing field") || msg.contains("invalid type") {
        ConfigError::Invalid {
            key: "<schema>".into(),
            message: msg,
        }
    } else {
        ConfigError::Syntax(msg)
    }
}

/// Allowed keys per target kind; internally tagged enums do not reject
/// unknown keys on their own, so target tables are checked by hand.
fn check_target_keys(section: &str, v: &toml::Value) -> Result<(), ConfigError> {
    let table = v.as_table().ok_or_else(|| ConfigError::Invalid {
        key: section.into(),
        message: "must be a table".into(),
    })?;
    let kind = table.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    let allowed: &[&str] = match kind {
        "gaussian_mixture" => &["kind", "dim", "conds", "components"],
        "checkerboard" => &["kind", "grid", "extent", "conds"],
        "two_moons" => &["kind", "width", "conds"],
        _ => &["kind"],
    };
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(format!("{section}.{key}")));
        }
    }
    if let Some(toml::Value::Array(comps)) = table.get("components") {
        for (i, c) in comps.iter().enumerate() {
            if let Some(ct) = c.as_table() {
                for key in ct.keys() {
                    if !["cond", "weight", "mean", "std"].contains(&key.as_str()) {
                        return Err(ConfigError::UnknownKey(format!(
                            "{section}.components[{i}].{key}"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Parse and fully validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let body = match std::fs::read_to_string(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ConfigError::Missing(path.to_path_buf()))
        }
        Err(e) => return Err(ConfigError::Unreadable(e.to_string())),
    };
    parse_config_str(&body)
}

/// Parse and validate config text (used by `parse_config` and tests).
pub fn parse_config_str(body: &str) -> Result<ExperimentConfig, ConfigError> {
    let value: toml::Value = toml::from_str(body).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    if let Some(t) = value.get("target") {
        check_target_keys("target", t)?;
    }
    for section in ["bc_target", "eval_target"] {
        if let Some(t) = value.get(section) {
            check_target_keys(section, t)?;
        }
    }
    let cfg: ExperimentConfig = value
        .try_into()
        .map_err(|e| classify_toml_error(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
