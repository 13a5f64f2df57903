//! Discriminators and adversarial losses.
//!
//! The critic `D_ω(x, c)` produces one real logit; `σ(logit)` is the
//! probability that `x` came from the expert. Three variants:
//!
//! - `scratch` — an MLP straight on `x ⊕ embed(c)`.
//! - `flow_feature` — a trainable copy of the policy network evaluated at a
//!   fixed probe time; its last hidden activations feed the logit head.
//! - `frozen_feature` — a fixed random projection (tanh features) feeding a
//!   trainable head; the feature map never changes after construction.
//!
//! Log-sigmoids are computed as `log σ(z) = -softplus(-z)`, so nothing
//! overflows at |z| > 30. The policy-gradient reward is
//! `r(x) = -log(1 - σ(D(x))) = softplus(D(x))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    log_sigmoid, sigmoid, softplus, Activation, Grads, MlpParams, NodeId, Shape, Tape, TapedMlp,
    Tensor,
};
use crate::flow::{time_features, VectorField};
use crate::{Error, Result};

/// Which feature pathway feeds the logit head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscVariant {
    Scratch,
    FlowFeature,
    FrozenFeature,
}

/// Fixed random-projection feature map: `tanh(P·x + q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenMap {
    pub proj: Tensor,
    pub bias: Tensor,
}

impl FrozenMap {
    fn features(&self, x: &[f64]) -> Vec<f64> {
        let h = crate::diffcore::affine_kernel(&self.proj, Some(&self.bias), &[x]);
        h.iter().map(|v| v.tanh()).collect()
    }
}

/// Persisted power-iteration vectors, one per head layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<Vec<f64>>,
}

/// The critic. `head` and `cond_emb` are always trainable; `backbone`
/// (flow_feature) is trainable too; `frozen` never changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub variant: DiscVariant,
    pub head: MlpParams,
    /// Matrix `emb_dim × n_classes`, class c selects column c.
    pub cond_emb: Tensor,
    pub backbone: Option<VectorField>,
    pub frozen: Option<FrozenMap>,
    /// Probe time at which flow_feature embeds its input.
    pub probe_t: f64,
    pub spectral_norm: bool,
    pub spectral_state: SpectralState,
    pub data_dim: usize,
    pub n_classes: usize,
}

/// Construction knobs for [`Discriminator::init`].
#[derive(Clone, Debug)]
pub struct DiscSpec {
    pub variant: DiscVariant,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub emb_dim: usize,
    pub spectral_norm: bool,
    pub probe_t: f64,
    pub frozen_feat_dim: usize,
}

impl Default for DiscSpec {
    fn default() -> Self {
        DiscSpec {
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

impl Discriminator {
    /// Build a discriminator. `flow_feature` copies `policy` as its
    /// backbone (required for that variant).
    pub fn init(
        data_dim: usize,
        n_classes: usize,
        spec: &DiscSpec,
        policy: Option<&VectorField>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (backbone, frozen, feat_dim) = match spec.variant {
            DiscVariant::Scratch => (None, None, data_dim),
            DiscVariant::FlowFeature => {
                let vf = policy
                    .ok_or_else(|| {
                        Error::Contract("flow_feature discriminator needs a policy to copy".into())
                    })?
                    .clone();
                let width = last_hidden_width(&vf.net).ok_or_else(|| {
                    Error::Contract("flow_feature backbone needs at least one hidden layer".into())
                })?;
                (Some(vf), None, width)
            }
            DiscVariant::FrozenFeature => {
                let f = spec.frozen_feat_dim;
                let bound = 1.0 / (data_dim as f64).sqrt();
                let proj = (0..f * data_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let bias = (0..f).map(|_| rng.gen_range(-bound..bound)).collect();
                (
                    None,
                    Some(FrozenMap {
                        proj: Tensor::matrix(f, data_dim, proj)?,
                        bias: Tensor::vector(bias),
                    }),
                    f,
                )
            }
        };
        let mut dims = vec![feat_dim + spec.emb_dim];
        dims.extend_from_slice(&spec.hidden);
        dims.push(1);
        let head = MlpParams::init(&dims, spec.activation, rng);
        let bound = 1.0 / (spec.emb_dim as f64).sqrt();
        let emb = (0..spec.emb_dim * n_classes)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let spectral_state = SpectralState {
            u: head
                .layers
                .iter()
                .map(|l| match l.w.shape {
                    Shape::Matrix { rows, .. } => vec![1.0 / (rows as f64).sqrt(); rows],
                    _ => unreachable!(),
                })
                .collect(),
        };
        Ok(Discriminator {
            variant: spec.variant,
            head,
            cond_emb: Tensor::matrix(spec.emb_dim, n_classes, emb)?,
            backbone,
            frozen,
            probe_t: spec.probe_t,
            spectral_norm: spec.spectral_norm,
            spectral_state,
            data_dim,
            n_classes,
        })
    }

    fn cond_column(&self, cond: usize) -> Result<Vec<f64>> {
        let (rows, cols) = match self.cond_emb.shape {
            Shape::Matrix { rows, cols } => (rows, cols),
            _ => unreachable!(),
        };
        if cond >= cols {
            return Err(Error::Contract(format!(
                "conditioning class {cond} out of range (arity {cols})"
            )));
        }
        Ok((0..rows)
            .map(|i| self.cond_emb.data[i * cols + cond])
            .collect())
    }

    /// Tape-free logit.
    pub fn logit(&self, x: &[f64], cond: usize) -> Result<f64> {
        if x.len() != self.data_dim {
            return Err(Error::Shape {
                context: "disc_logit input",
                expected: format!("{} entries", self.data_dim),
                got: format!("{}", x.len()),
            });
        }
        let emb = self.cond_column(cond)?;
        let features = match self.variant {
            DiscVariant::Scratch => x.to_vec(),
            DiscVariant::FlowFeature => {
                let vf = self.backbone.as_ref().expect("flow_feature backbone");
                let tf = time_features(self.probe_t, vf.time_freqs);
                let bemb = backbone_cond_column(vf, cond)?;
                let (hidden, _) = vf.net.forward_with_hidden(&[x, &tf, &bemb])?;
                hidden.last().expect("hidden layer").clone()
            }
            DiscVariant::FrozenFeature => self.frozen.as_ref().expect("frozen map").features(x),
        };
        let out = self.head.forward_segments(&[&features, &emb])?;
        Ok(out[0])
    }

    /// Trainable parameter tensors: head layers, cond embedding, then
    /// (flow_feature only) the backbone field.
    pub fn flatten(&self) -> Vec<Tensor> {
        let mut out = self.head.flatten();
        out.push(self.cond_emb.clone());
        if let Some(vf) = &self.backbone {
            out.extend(vf.flatten());
        }
        out
    }

    pub fn assign(&mut self, tensors: &[Tensor]) {
        let head_n = self.head.layers.len() * 2;
        let mut it = tensors[..head_n].iter().cloned();
        self.head.assign(&mut it);
        self.cond_emb = tensors[head_n].clone();
        if let Some(vf) = &mut self.backbone {
            vf.assign(&tensors[head_n + 1..]);
        } else {
            assert_eq!(tensors.len(), head_n + 1, "extra tensors in assign");
        }
    }

    /// Renormalize every head layer by its estimated spectral norm,
    /// advancing the persisted power-iteration vectors.
    pub fn apply_spectral_norm(&mut self, iters: usize) {
        for (layer, u) in self.head.layers.iter_mut().zip(&mut self.spectral_state.u) {
            spectral_normalize(&mut layer.w, u, iters);
        }
    }
}

fn last_hidden_width(net: &MlpParams) -> Option<usize> {
    if net.layers.len() < 2 {
        return None;
    }
    match net.layers[net.layers.len() - 2].w.shape {
        Shape::Matrix { rows, .. } => Some(rows),
        _ => None,
    }
}

fn backbone_cond_column(vf: &VectorField, cond: usize) -> Result<Vec<f64>> {
    let (rows, cols) = match vf.cond_emb.shape {
        Shape::Matrix { rows, cols } => (rows, cols),
        _ => unreachable!(),
    };
    if cond >= cols {
        return Err(Error::Contract(format!(
            "conditioning class {cond} out of range (arity {cols})"
        )));
    }
    Ok((0..rows)
        .map(|i| vf.cond_emb.data[i * cols + cond])
        .collect())
}

/// A [`Discriminator`] recorded on a tape.
pub struct TapedDiscriminator {
    variant: DiscVariant,
    head: TapedMlp,
    cond_emb_id: NodeId,
    backbone: Option<TapedBackbone>,
    frozen: Option<FrozenMap>,
    probe_t: f64,
    n_classes: usize,
    n_head_tensors: usize,
}

struct TapedBackbone {
    net: TapedMlp,
    cond_emb_id: NodeId,
    time_freqs: usize,
}

impl TapedDiscriminator {
    pub fn record(tape: &mut Tape, disc: &Discriminator) -> Self {
        let head = TapedMlp::record(tape, &disc.head);
        let cond_emb_id = tape.param(disc.cond_emb.clone());
        let backbone = disc.backbone.as_ref().map(|vf| TapedBackbone {
            net: TapedMlp::record(tape, &vf.net),
            cond_emb_id: tape.param(vf.cond_emb.clone()),
            time_freqs: vf.time_freqs,
        });
        TapedDiscriminator {
            variant: disc.variant,
            head,
            cond_emb_id,
            backbone,
            frozen: disc.frozen.clone(),
            probe_t: disc.probe_t,
            n_classes: disc.n_classes,
            n_head_tensors: disc.head.layers.len() * 2,
        }
    }

    fn embed(&self, tape: &mut Tape, emb_id: NodeId, cond: usize) -> Result<NodeId> {
        if cond >= self.n_classes {
            return Err(Error::Contract(format!(
                "conditioning class {cond} out of range (arity {})",
                self.n_classes
            )));
        }
        let mut onehot = vec![0.0; self.n_classes];
        onehot[cond] = 1.0;
        let oh = tape.constant_vector(onehot);
        tape.affine(emb_id, None, &[oh])
    }

    /// Scalar logit node for `x` (a vector node) under conditioning `cond`.
    pub fn logit(&self, tape: &mut Tape, x: NodeId, cond: usize) -> Result<NodeId> {
        let emb = self.embed(tape, self.cond_emb_id, cond)?;
        let features = match self.variant {
            DiscVariant::Scratch => x,
            DiscVariant::FlowFeature => {
                let bb = self.backbone.as_ref().expect("flow_feature backbone");
                let tf = tape.constant_vector(time_features(self.probe_t, bb.time_freqs));
                let bemb = self.embed(tape, bb.cond_emb_id, cond)?;
                let (hidden, _) = bb.net.apply_with_hidden(tape, &[x, tf, bemb])?;
                *hidden.last().expect("hidden layer")
            }
            DiscVariant::FrozenFeature => {
                // Projection and bias enter as constant leaves: gradients
                // flow through them to x, but the map itself never trains.
                let map = self.frozen.as_ref().expect("frozen map");
                let p = tape.constant(map.proj.clone());
                let q = tape.constant(map.bias.clone());
                let lin = tape.affine(p, Some(q), &[x])?;
                tape.tanh(lin)
            }
        };
        let out = self.head.apply(tape, &[features, emb])?;
        Ok(tape.sum(out))
    }

    /// Gradients in [`Discriminator::flatten`] order.
    pub fn grads(&self, tape: &Tape, grads: &Grads) -> Vec<Tensor> {
        let mut out = self.head.grads(tape, grads);
        debug_assert_eq!(out.len(), self.n_head_tensors);
        out.push(grads.get(self.cond_emb_id, tape.value(self.cond_emb_id)));
        if let Some(bb) = &self.backbone {
            out.extend(bb.net.grads(tape, grads));
            out.push(grads.get(bb.cond_emb_id, tape.value(bb.cond_emb_id)));
        }
        out
    }
}

/// Binary-cross-entropy discriminator loss on the tape:
/// `-[mean log σ(D(x_E)) + mean log(1 - σ(D(x_0)))]`.
pub fn disc_loss(
    tape: &mut Tape,
    disc: &TapedDiscriminator,
    expert: &[(Vec<f64>, usize)],
    policy: &[(Vec<f64>, usize)],
) -> Result<NodeId> {
    if expert.is_empty() || policy.is_empty() {
        return Err(Error::Contract(
            "disc_loss requires non-empty expert and policy batches".into(),
        ));
    }
    let mut expert_terms = Vec::with_capacity(expert.len());
    for (x, cond) in expert {
        let xn = tape.constant_vector(x.clone());
        let logit = disc.logit(tape, xn, *cond)?;
        expert_terms.push(tape.log_sigmoid(logit));
    }
    let mut policy_terms = Vec::with_capacity(policy.len());
    for (x, cond) in policy {
        let xn = tape.constant_vector(x.clone());
        let logit = disc.logit(tape, xn, *cond)?;
        let neg = tape.scale(logit, -1.0);
        policy_terms.push(tape.log_sigmoid(neg));
    }
    let e = tape.mean_of(&expert_terms)?;
    let p = tape.mean_of(&policy_terms)?;
    let total = tape.add(e, p)?;
    Ok(tape.scale(total, -1.0))
}

/// Non-saturating generator loss on the tape: mean of `-log σ(D(x0'))` over
/// already-recorded sample nodes. Discriminator parameters receive adjoints
/// too, but callers extract only policy gradients, so ω is effectively a
/// constant here.
pub fn generator_pd_loss(
    tape: &mut Tape,
    disc: &TapedDiscriminator,
    samples: &[(NodeId, usize)],
) -> Result<NodeId> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "generator_pd_loss requires at least one sample".into(),
        ));
    }
    let mut terms = Vec::with_capacity(samples.len());
    for &(x, cond) in samples {
        let logit = disc.logit(tape, x, cond)?;
        terms.push(tape.log_sigmoid(logit));
    }
    let m = tape.mean_of(&terms)?;
    Ok(tape.scale(m, -1.0))
}

/// Score-based reward: `r(x) = -log(1 - σ(D(x))) = softplus(D(x))`.
/// No gradient flows through this to the policy.
pub fn pg_reward(disc: &Discriminator, x: &[f64], cond: usize) -> Result<f64> {
    Ok(softplus(disc.logit(x, cond)?))
}

/// Mean of `σ(D(x))` over a batch, for logging.
pub fn mean_sigma(disc: &Discriminator, batch: &[(Vec<f64>, usize)]) -> Result<f64> {
    let mut acc = 0.0;
    for (x, cond) in batch {
        acc += sigmoid(disc.logit(x, *cond)?);
    }
    Ok(acc / batch.len() as f64)
}

/// Log-sigmoid for external callers that want the stable form directly.
pub fn stable_log_sigmoid(z: f64) -> f64 {
    log_sigmoid(z)
}

/// One discriminator descent step on [`disc_loss`]: backward, global-norm
/// clip, AdamW, then spectral renormalization of the head when enabled.
/// Returns (loss value, pre-clip gradient norm).
pub fn disc_train_step(
    disc: &mut Discriminator,
    opt: &mut crate::diffcore::AdamState,
    expert: &[(Vec<f64>, usize)],
    policy: &[(Vec<f64>, usize)],
    grad_clip: f64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let taped = TapedDiscriminator::record(&mut tape, disc);
    let loss = disc_loss(&mut tape, &taped, expert, policy)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            what: "discriminator loss",
            index: 0,
        });
    }
    let grads = tape.backward(loss)?;
    let mut g = taped.grads(&tape, &grads);
    let norm = crate::diffcore::clip_global_norm(&mut g, grad_clip)?;
    let mut params = disc.flatten();
    crate::diffcore::adamw_step(&mut params, &g, opt)?;
    disc.assign(&params);
    if disc.spectral_norm {
        disc.apply_spectral_norm(1);
    }
    Ok((loss_value, norm))
}

/// Scale `w` by the reciprocal of its estimated leading singular value.
///
/// `u` is the persisted left power-iteration vector; it is advanced in
/// place so repeated calls sharpen the estimate. A zero matrix is returned
/// unchanged (σ treated as 1). Returns the estimate.
pub fn spectral_normalize(w: &mut Tensor, u: &mut Vec<f64>, iters: usize) -> f64 {
    let (rows, cols) = match w.shape {
        Shape::Matrix { rows, cols } => (rows, cols),
        _ => panic!("spectral_normalize expects a matrix"),
    };
    assert!(iters >= 1, "spectral_normalize requires iters >= 1");
    assert_eq!(u.len(), rows);
    if w.data.iter().all(|&v| v == 0.0) {
        return 1.0;
    }
    let mut v = vec![0.0; cols];
    for _ in 0..iters {
        // v ∝ Wᵀu
        for vj in v.iter_mut() {
            *vj = 0.0;
        }
        for i in 0..rows {
            let ui = u[i];
            for j in 0..cols {
                v[j] += w.data[i * cols + j] * ui;
            }
        }
        normalize(&mut v);
        // u ∝ Wv
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += w.data[i * cols + j] * v[j];
            }
            u[i] = acc;
        }
        normalize(u);
    }
    let mut sigma = 0.0;
    for i in 0..rows {
        let mut acc = 0.0;
        for j in 0..cols {
            acc += w.data[i * cols + j] * v[j];
        }
        sigma += u[i] * acc;
    }
    if sigma > 0.0 {
        for val in &mut w.data {
            *val /= sigma;
        }
    }
    sigma
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in x.iter_mut() {
            *v /= n;
        }
    } else {
        // degenerate direction; restart from a uniform vector
        let u = 1.0 / (x.len() as f64).sqrt();
        for v in x.iter_mut() {
            *v = u;
        }
    }
}

/// Exact leading singular value via Jacobi eigen-iteration on WᵀW.
/// Independent of the power-iteration path; used as its oracle.
pub fn sigma_max_dense(w: &Tensor) -> f64 {
    let (rows, cols) = match w.shape {
        Shape::Matrix { rows, cols } => (rows, cols),
        _ => panic!("sigma_max_dense expects a matrix"),
    };
    // A = WᵀW, symmetric cols×cols
    let n = cols;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..rows {
                acc += w.data[k * cols + i] * w.data[k * cols + j];
            }
            a[i * n + j] = acc;
        }
    }
    // cyclic Jacobi sweeps
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let lambda_max = (0..n).map(|i| a[i * n + i]).fold(0.0_f64, f64::max);
    lambda_max.max(0.0).sqrt()
}

/// Freeze the policy for the first `warmup_steps` iterations so the
/// discriminator sees a stationary generator before the game starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub warmup_steps: u64,
}

impl WarmupSchedule {
    /// True while the policy must not move (0-based step index).
    pub fn policy_frozen(&self, step: u64) -> bool {
        step < self.warmup_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scratch_disc(rng: &mut ChaCha8Rng) -> Discriminator {
        Discriminator::init(2, 1, &DiscSpec::default(), None, rng).unwrap()
    }

    #[test]
    fn zero_head_gives_logit_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = scratch_disc(&mut rng);
        d.head = MlpParams::zeros(&[6, 4, 1], Activation::Relu);
        let z = d.logit(&[0.3, -0.8], 0).unwrap();
        assert_eq!(z, 0.0);
        assert_eq!(sigmoid(z), 0.5);
    }

    #[test]
    fn frozen_feature_is_deterministic_and_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = DiscSpec {
            variant: DiscVariant::FrozenFeature,
            ..DiscSpec::default()
        };
        let d = Discriminator::init(2, 1, &spec, None, &mut rng).unwrap();
        let x = [0.4, 1.1];
        assert_eq!(d.logit(&x, 0).unwrap(), d.logit(&x, 0).unwrap());
        let map_before = d.frozen.clone().unwrap();
        // feature map survives a parameter assignment round-trip untouched
        let mut d2 = d.clone();
        let flat = d.flatten();
        d2.assign(&flat);
        assert_eq!(d2.frozen.unwrap(), map_before);
    }

    #[test]
    fn flow_feature_logit_tracks_backbone_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vf = VectorField::init(2, &[8, 8], Activation::Tanh, 1, 4, 4, &mut rng);
        let spec = DiscSpec {
            variant: DiscVariant::FlowFeature,
            ..DiscSpec::default()
        };
        let mut d = Discriminator::init(2, 1, &spec, Some(&vf), &mut rng).unwrap();
        let x = [0.7, -0.2];
        let before = d.logit(&x, 0).unwrap();
        d.backbone.as_mut().unwrap().net.layers[0].w.data[0] += 0.5;
        let after = d.logit(&x, 0).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn disc_loss_balanced_ignorance_point() {
        // all logits 0 → 2·ln 2
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = scratch_disc(&mut rng);
        d.head = MlpParams::zeros(&[6, 4, 1], Activation::Relu);
        let batch = vec![(vec![0.1, 0.2], 0), (vec![-0.4, 0.9], 0)];
        let mut tape = Tape::new();
        let td = TapedDiscriminator::record(&mut tape, &d);
        let loss = disc_loss(&mut tape, &td, &batch, &batch).unwrap();
        assert!((tape.value(loss).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn disc_loss_saturates_to_zero_under_perfect_separation() {
        // head computes logit = 20·x₀ (relu net: 20·relu(x) − 20·relu(−x))
        let head = MlpParams {
            layers: vec![
                Layer {
                    w: Tensor::matrix(2, 5, vec![1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0])
                        .unwrap(),
                    b: Tensor::vector(vec![0.0, 0.0]),
                },
                Layer {
                    w: Tensor::matrix(1, 2, vec![20.0, -20.0]).unwrap(),
                    b: Tensor::vector(vec![0.0]),
                },
            ],
            activation: Activation::Relu,
        };
        let d = Discriminator {
            variant: DiscVariant::Scratch,
            head,
            cond_emb: Tensor::zeros(Shape::Matrix { rows: 4, cols: 1 }),
            backbone: None,
            frozen: None,
            probe_t: 0.5,
            spectral_norm: false,
            spectral_state: SpectralState { u: vec![vec![1.0, 0.0], vec![1.0]] },
            data_dim: 1,
            n_classes: 1,
        };
        assert!((d.logit(&[1.0], 0).unwrap() - 20.0).abs() < 1e-12);
        let expert = vec![(vec![1.0], 0)];
        let policy = vec![(vec![-1.0], 0)];
        let mut tape = Tape::new();
        let td = TapedDiscriminator::record(&mut tape, &d);
        let loss = disc_loss(&mut tape, &td, &expert, &policy).unwrap();
        assert!(tape.value(loss).item() < 1e-8);
    }

    #[test]
    fn disc_loss_matches_straight_line_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = scratch_disc(&mut rng);
        let expert: Vec<(Vec<f64>, usize)> = (0..3)
            .map(|_| (vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], 0))
            .collect();
        let policy: Vec<(Vec<f64>, usize)> = (0..4)
            .map(|_| (vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], 0))
            .collect();
        let mut expect = 0.0;
        for (x, c) in &expert {
            expect -= sigmoid(d.logit(x, *c).unwrap()).ln() / expert.len() as f64;
        }
        for (x, c) in &policy {
            expect -= (1.0 - sigmoid(d.logit(x, *c).unwrap())).ln() / policy.len() as f64;
        }
        let mut tape = Tape::new();
        let td = TapedDiscriminator::record(&mut tape, &d);
        let loss = disc_loss(&mut tape, &td, &expert, &policy).unwrap();
        assert!((tape.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn disc_loss_permutation_invariant_within_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = scratch_disc(&mut rng);
        let expert: Vec<(Vec<f64>, usize)> = (0..4)
            .map(|_| (vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], 0))
            .collect();
        let policy: Vec<(Vec<f64>, usize)> = (0..4)
            .map(|_| (vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], 0))
            .collect();
        let value = |e: &[(Vec<f64>, usize)], p: &[(Vec<f64>, usize)]| {
            let mut tape = Tape::new();
            let td = TapedDiscriminator::record(&mut tape, &d);
            let loss = disc_loss(&mut tape, &td, e, p).unwrap();
            tape.value(loss).item()
        };
        let base = value(&expert, &policy);
        let mut e2 = expert.clone();
        e2.reverse();
        let mut p2 = policy.clone();
        p2.swap(0, 3);
        p2.swap(1, 2);
        assert!((value(&e2, &p2) - base).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_reference_points() {
        // logit 0 → ln 2; large positive logit → ~0
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut d = scratch_disc(&mut rng);
        d.head = MlpParams::zeros(&[6, 4, 1], Activation::Relu);
        let mut tape = Tape::new();
        let td = TapedDiscriminator::record(&mut tape, &d);
        let x = tape.constant_vector(vec![0.3, 0.4]);
        let loss = generator_pd_loss(&mut tape, &td, &[(x, 0)]).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((-log_sigmoid(40.0)) < 1e-15);
    }

    #[test]
    fn pg_reward_reference_points_and_monotonicity() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let expect = 2.061153620314381e-9; // ln(1 + e^-20)
        assert!((softplus(-20.0) - expect).abs() / expect < 1e-12);
        assert!(softplus(5.0) > softplus(2.0));
    }

    #[test]
    fn pg_reward_is_definitionally_consistent_with_the_logit() {
        // r(x) + log(1 − σ(D(x))) = 0
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = scratch_disc(&mut rng);
        for _ in 0..20 {
            let x = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let r = pg_reward(&d, &x, 0).unwrap();
            let z = d.logit(&x, 0).unwrap();
            assert!((r + (1.0 - sigmoid(z)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_normalize_diagonal_and_identity() {
        // diag(2,1) → diag(1, 0.5)
        let mut w = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let mut u = vec![std::f64::consts::FRAC_1_SQRT_2; 2];
        let sigma = spectral_normalize(&mut w, &mut u, 60);
        assert!((sigma - 2.0).abs() < 1e-9);
        assert!((w.data[0] - 1.0).abs() < 1e-9 && (w.data[3] - 0.5).abs() < 1e-9);

        let mut id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut u = vec![std::f64::consts::FRAC_1_SQRT_2; 2];
        spectral_normalize(&mut id, &mut u, 5);
        assert!((id.data[0] - 1.0).abs() < 1e-12 && (id.data[3] - 1.0).abs() < 1e-12);

        let mut z = Tensor::zeros(Shape::Matrix { rows: 2, cols: 2 });
        let mut u = vec![std::f64::consts::FRAC_1_SQRT_2; 2];
        let s = spectral_normalize(&mut z, &mut u, 5);
        assert_eq!(s, 1.0);
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectral_normalize_matches_dense_svd_oracle_on_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let data: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut w = Tensor::matrix(4, 4, data).unwrap();
            let mut u = vec![0.5; 4];
            spectral_normalize(&mut w, &mut u, 30);
            let sigma_after = sigma_max_dense(&w);
            assert!(
                (sigma_after - 1.0).abs() < 1e-3,
                "normalized spectral norm {sigma_after}"
            );
        }
    }

    #[test]
    fn warmup_freezes_then_releases() {
        let w = WarmupSchedule { warmup_steps: 25 };
        assert!(w.policy_frozen(0));
        assert!(w.policy_frozen(24));
        assert!(!w.policy_frozen(25));
    }
}
