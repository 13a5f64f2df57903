//! Flow-matching machinery.
//!
//! Convention: t = 0 is data, t = 1 is noise. The interpolation path is
//! `x_t = (1-t)·x0 + t·ε`, so the conditional target velocity is
//! `dx_t/dt = ε - x0` and the sampler integrates from t = 1 down to t = 0
//! with `x_{t-Δ} = x_t - Δ·v_θ(x_t, t, c)`.
//!
//! The single-step denoise estimates the clean sample from an interpolated
//! state with one network evaluation:
//!
//! ```text
//! x0' = (x_t + Δt·v_θ(x_t, t, c) - (t + Δt)·ε) / (1 - (t + Δt))
//! ```
//!
//! which is exact whenever `v_θ` equals the conditional velocity. The
//! denominator vanishes as t + Δt → 1, so callers draw
//! t ~ U(0, 1 - Δt - DENOISE_T_MARGIN) instead of U(0, 1).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Grads, MlpParams, NodeId, Tape, TapedMlp, Tensor};
use crate::{Error, Result};

/// Guard band keeping the denoise denominator away from zero.
pub const DENOISE_T_MARGIN: f64 = 1e-3;

/// One realization of the interpolation path.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub cond: usize,
}

impl FlowSample {
    /// Build a sample, computing `x_t` from the invariant.
    pub fn new(x0: Vec<f64>, eps: Vec<f64>, t: f64, cond: usize) -> Result<Self> {
        let x_t = interpolate(&x0, &eps, t)?;
        Ok(FlowSample {
            x0,
            eps,
            t,
            x_t,
            cond,
        })
    }
}

/// `x_t = (1-t)·x0 + t·ε`.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape {
            context: "interpolate",
            expected: format!("{} entries", x0.len()),
            got: format!("{}", eps.len()),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!(
            "interpolate requires t in [0,1], got {t}"
        )));
    }
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&a, &e)| (1.0 - t) * a + t * e)
        .collect())
}

/// The policy: a conditioned vector field `v_θ(x, t, c)` over data dimension
/// `data_dim`, realized as an MLP over `x ⊕ time-features(t) ⊕ embed(c)`.
///
/// Time features are sinusoids at `time_freqs` octave-spaced frequencies;
/// the conditioning embedding is a learned column per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    pub net: MlpParams,
    /// Matrix `emb_dim × n_classes`; class `c` selects column `c`.
    pub cond_emb: Tensor,
    pub data_dim: usize,
    pub time_freqs: usize,
    pub n_classes: usize,
}

impl VectorField {
    pub fn input_dim(data_dim: usize, time_freqs: usize, emb_dim: usize) -> usize {
        data_dim + 2 * time_freqs + emb_dim
    }

    pub fn init(
        data_dim: usize,
        hidden: &[usize],
        activation: crate::diffcore::Activation,
        n_classes: usize,
        emb_dim: usize,
        time_freqs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![Self::input_dim(data_dim, time_freqs, emb_dim)];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let net = MlpParams::init(&dims, activation, rng);
        let bound = 1.0 / (emb_dim as f64).sqrt();
        let emb = (0..emb_dim * n_classes)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        VectorField {
            net,
            cond_emb: Tensor::matrix(emb_dim, n_classes, emb).expect("sized"),
            data_dim,
            time_freqs,
            n_classes,
        }
    }

    /// A field that ignores its input and always returns `velocity`
    /// (single linear layer, zero weights, bias = velocity).
    pub fn constant_field(data_dim: usize, velocity: &[f64], n_classes: usize) -> Self {
        assert_eq!(velocity.len(), data_dim);
        let time_freqs = 4;
        let emb_dim = 4;
        let mut net = MlpParams::zeros(
            &[Self::input_dim(data_dim, time_freqs, emb_dim), data_dim],
            crate::diffcore::Activation::Tanh,
        );
        net.layers[0].b = Tensor::vector(velocity.to_vec());
        VectorField {
            net,
            cond_emb: Tensor::zeros(crate::diffcore::Shape::Matrix {
                rows: emb_dim,
                cols: n_classes,
            }),
            data_dim,
            time_freqs,
            n_classes,
        }
    }

    pub fn emb_dim(&self) -> usize {
        match self.cond_emb.shape {
            crate::diffcore::Shape::Matrix { rows, .. } => rows,
            _ => unreachable!(),
        }
    }

    pub fn time_features(&self, t: f64) -> Vec<f64> {
        time_features(t, self.time_freqs)
    }

    fn cond_column(&self, cond: usize) -> Result<Vec<f64>> {
        let (rows, cols) = match self.cond_emb.shape {
            crate::diffcore::Shape::Matrix { rows, cols } => (rows, cols),
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

    /// Tape-free evaluation of `v_θ(x, t, c)`.
    pub fn eval(&self, x: &[f64], t: f64, cond: usize) -> Result<Vec<f64>> {
        let tf = self.time_features(t);
        let emb = self.cond_column(cond)?;
        self.net.forward_segments(&[x, &tf, &emb])
    }

    /// Parameter tensors: network layers, then the conditioning embedding.
    pub fn flatten(&self) -> Vec<Tensor> {
        let mut out = self.net.flatten();
        out.push(self.cond_emb.clone());
        out
    }

    pub fn assign(&mut self, tensors: &[Tensor]) {
        let mut it = tensors.iter().cloned();
        self.net.assign(&mut it);
        self.cond_emb = it.next().expect("cond_emb tensor");
        assert!(it.next().is_none(), "extra tensors in assign");
    }
}

/// Sinusoidal features of t: `[sin(2^j·π·t), cos(2^j·π·t)]` for j < freqs.
pub fn time_features(t: f64, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs);
    for j in 0..freqs {
        let w = std::f64::consts::PI * (1 << j) as f64 * t;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

/// A [`VectorField`] recorded on a tape; gradients flow to the network
/// weights and the conditioning embedding.
pub struct TapedVectorField {
    net: TapedMlp,
    cond_emb_id: NodeId,
    time_freqs: usize,
    n_classes: usize,
}

impl TapedVectorField {
    pub fn record(tape: &mut Tape, vf: &VectorField) -> Self {
        let net = TapedMlp::record(tape, &vf.net);
        let cond_emb_id = tape.param(vf.cond_emb.clone());
        TapedVectorField {
            net,
            cond_emb_id,
            time_freqs: vf.time_freqs,
            n_classes: vf.n_classes,
        }
    }

    fn embed(&self, tape: &mut Tape, cond: usize) -> Result<NodeId> {
        if cond >= self.n_classes {
            return Err(Error::Contract(format!(
                "conditioning class {cond} out of range (arity {})",
                self.n_classes
            )));
        }
        let mut onehot = vec![0.0; self.n_classes];
        onehot[cond] = 1.0;
        let oh = tape.constant_vector(onehot);
        tape.affine(self.cond_emb_id, None, &[oh])
    }

    /// `v_θ(x, t, c)` with `x` already on the tape.
    pub fn eval(&self, tape: &mut Tape, x: NodeId, t: f64, cond: usize) -> Result<NodeId> {
        let tf = tape.constant_vector(time_features(t, self.time_freqs));
        let emb = self.embed(tape, cond)?;
        self.net.apply(tape, &[x, tf, emb])
    }

    /// Gradients in [`VectorField::flatten`] order.
    pub fn grads(&self, tape: &Tape, grads: &Grads) -> Vec<Tensor> {
        let mut out = self.net.grads(tape, grads);
        out.push(grads.get(self.cond_emb_id, tape.value(self.cond_emb_id)));
        out
    }
}

/// Conditional flow matching loss for one sample, recorded on the tape:
/// mean over dimensions of `(v_θ(x_t, t, c) - (ε - x0))²`.
pub fn cfm_loss(tape: &mut Tape, vf: &TapedVectorField, sample: &FlowSample) -> Result<NodeId> {
    let target: Vec<f64> = sample
        .eps
        .iter()
        .zip(&sample.x0)
        .map(|(&e, &a)| e - a)
        .collect();
    let x_t = tape.constant_vector(sample.x_t.clone());
    let v = vf.eval(tape, x_t, sample.t, sample.cond)?;
    let target = tape.constant_vector(target);
    let diff = tape.sub(v, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Tape-free value of the CFM loss. Shares every kernel with [`cfm_loss`],
/// so the two agree bitwise on identical inputs.
pub fn cfm_value(vf: &VectorField, sample: &FlowSample) -> Result<f64> {
    let v = vf.eval(&sample.x_t, sample.t, sample.cond)?;
    let n = v.len() as f64;
    let mut acc = 0.0;
    for k in 0..v.len() {
        let d = v[k] - (sample.eps[k] - sample.x0[k]);
        acc += d * d;
    }
    Ok(acc / n)
}

/// Integrate the learned field from noise (t=1) to data (t=0) with uniform
/// Euler steps. Returns the terminal state.
pub fn euler_sample(vf: &VectorField, eps: &[f64], cond: usize, n_steps: usize) -> Result<Vec<f64>> {
    Ok(euler_trajectory(vf, eps, cond, n_steps)?.pop().expect("non-empty"))
}

/// As [`euler_sample`], but returns all `n_steps + 1` states from t=1 to t=0.
pub fn euler_trajectory(
    vf: &VectorField,
    eps: &[f64],
    cond: usize,
    n_steps: usize,
) -> Result<Vec<Vec<f64>>> {
    if n_steps < 1 {
        return Err(Error::Contract(format!(
            "euler_sample requires n_steps >= 1, got {n_steps}"
        )));
    }
    let dt = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x = eps.to_vec();
    states.push(x.clone());
    for k in 0..n_steps {
        let t = 1.0 - k as f64 * dt;
        let v = vf.eval(&x, t, cond)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Sampling { step: k });
        }
        states.push(x.clone());
    }
    Ok(states)
}

/// Euler integration recorded on the tape, for pathwise gradients through
/// the whole trajectory.
pub fn euler_sample_taped(
    tape: &mut Tape,
    vf: &TapedVectorField,
    eps: &[f64],
    cond: usize,
    n_steps: usize,
) -> Result<NodeId> {
    if n_steps < 1 {
        return Err(Error::Contract(format!(
            "euler_sample requires n_steps >= 1, got {n_steps}"
        )));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = tape.constant_vector(eps.to_vec());
    for k in 0..n_steps {
        let t = 1.0 - k as f64 * dt;
        let v = vf.eval(tape, x, t, cond)?;
        let step = tape.scale(v, dt);
        x = tape.sub(x, step)?;
        if !tape.value(x).is_finite() {
            return Err(Error::Sampling { step: k });
        }
    }
    Ok(x)
}

/// Single-step denoising estimate of the clean sample, on the tape:
/// `x0' = (x_t + Δt·v_θ(x_t,t,c) - (t+Δt)·ε) / (1 - (t+Δt))`.
///
/// Gradients flow to the field parameters only; `x0`, `ε`, and `t` enter
/// as constants.
pub fn single_step_denoise(
    tape: &mut Tape,
    vf: &TapedVectorField,
    x0: &[f64],
    eps: &[f64],
    t: f64,
    delta_t: f64,
    cond: usize,
) -> Result<NodeId> {
    if delta_t <= 0.0 {
        return Err(Error::Contract(format!(
            "single_step_denoise requires delta_t > 0, got {delta_t}"
        )));
    }
    if t < 0.0 {
        return Err(Error::Contract(format!(
            "single_step_denoise requires t >= 0, got {t}"
        )));
    }
    if t + delta_t >= 1.0 - DENOISE_T_MARGIN {
        return Err(Error::NearSingularDenoise { t, delta_t });
    }
    let x_t = interpolate(x0, eps, t)?;
    let shifted: Vec<f64> = x_t
        .iter()
        .zip(eps)
        .map(|(&xt, &e)| xt - (t + delta_t) * e)
        .collect();

    let x_t_node = tape.constant_vector(x_t);
    let v = vf.eval(tape, x_t_node, t, cond)?;
    let scaled_v = tape.scale(v, delta_t);
    let shifted_node = tape.constant_vector(shifted);
    let numerator = tape.add(shifted_node, scaled_v)?;
    Ok(tape.scale(numerator, 1.0 / (1.0 - (t + delta_t))))
}

/// Draw the denoise timestep: t ~ U(0, 1 - Δt - DENOISE_T_MARGIN).
pub fn sample_denoise_t(rng: &mut impl Rng, delta_t: f64) -> f64 {
    let hi = 1.0 - delta_t - DENOISE_T_MARGIN;
    rng.gen_range(0.0..hi)
}
