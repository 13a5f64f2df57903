//! AdamW with bias correction and decoupled weight decay, plus global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

/// Optimizer hyperparameters. Defaults: β₁=0.9, β₂=0.999, eps=1e-8,
/// weight decay 0.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment accumulators and the step count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &[Tensor], hyper: AdamHyper) -> Self {
        AdamState {
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            step: 0,
            hyper,
        }
    }
}

/// One AdamW update in place. Rejects non-finite gradients before touching
/// any state, naming the offending parameter index.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            context: "adamw_step",
            expected: format!("{} tensors", params.len()),
            got: format!("{} grads / {} moments", grads.len(), state.m.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape != g.shape {
            return Err(Error::Shape {
                context: "adamw_step",
                expected: p.shape.to_string(),
                got: g.shape.to_string(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                index: i,
            });
        }
    }

    state.step += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);

    for i in 0..params.len() {
        let (p, g) = (&mut params[i].data, &grads[i].data);
        let (m, v) = (&mut state.m[i].data, &mut state.v[i].data);
        for k in 0..p.len() {
            m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
            v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * p[k]);
        }
    }
    Ok(())
}

/// Scale all gradients so the global L2 norm is at most `max_norm`;
/// returns the pre-clip norm. Scaling triggers only on strict excess.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Contract(format!(
            "clip_global_norm requires max_norm > 0, got {max_norm}"
        )));
    }
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                index: i,
            });
        }
        sq += g.data.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn first_step_matches_hand_evaluated_recurrence() {
        // lr=0.1, g=1, p=1, defaults → m̂=1, v̂≈1, p' ≈ 0.9
        let mut p = single(1.0);
        let g = single(1.0);
        let mut st = AdamState::new(&p, AdamHyper::with_lr(0.1));
        adamw_step(&mut p, &g, &mut st).unwrap();
        assert!((p[0].item() - 0.9).abs() < 1e-7, "got {}", p[0].item());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(0.75);
        let g = single(0.0);
        let mut st = AdamState::new(&p, AdamHyper::with_lr(0.1));
        adamw_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p[0].item(), 0.75);
    }

    #[test]
    fn repeated_equal_gradients_give_lr_sized_step() {
        // Bias-corrected sign step: second update magnitude ≈ lr.
        let mut p = single(5.0);
        let g = single(0.3);
        let mut st = AdamState::new(&p, AdamHyper::with_lr(0.01));
        adamw_step(&mut p, &g, &mut st).unwrap();
        let before = p[0].item();
        adamw_step(&mut p, &g, &mut st).unwrap();
        let delta = (before - p[0].item()).abs();
        assert!((delta - 0.01).abs() < 1e-6, "delta={delta}");
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = single(1.23456);
        let g = single(17.0);
        let mut st = AdamState::new(&p, AdamHyper::with_lr(0.0));
        adamw_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p[0].item(), 1.23456);
    }

    #[test]
    fn non_finite_gradient_rejected_with_index() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let g = vec![Tensor::scalar(0.0), Tensor::scalar(f64::NAN)];
        let mut st = AdamState::new(&p, AdamHyper::with_lr(0.1));
        let before = p.clone();
        match adamw_step(&mut p, &g, &mut st) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        // norm 2 → halved
        let mut g = vec![Tensor::vector(vec![2.0, 0.0])];
        let norm = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(norm, 2.0);
        assert_eq!(g[0].data, vec![1.0, 0.0]);

        // norm 0.5 → unchanged
        let mut g = vec![Tensor::vector(vec![0.5, 0.0])];
        clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(g[0].data, vec![0.5, 0.0]);

        // norm exactly max → unchanged (strict inequality)
        let mut g = vec![Tensor::vector(vec![1.0, 0.0])];
        clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(g[0].data, vec![1.0, 0.0]);
    }
}
