//! Verification harness for pathwise gradients: compare tape adjoints to
//! central finite differences over every parameter component.

use super::tensor::Tensor;
use crate::{Error, Result};

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over components of |analytic − numeric| / (|analytic| + |numeric| + 1e-12).
    pub max_rel_err: f64,
    /// (tensor index, component index) where the max occurred.
    pub worst: Option<(usize, usize)>,
    pub components_checked: usize,
}

/// Compare the analytic gradient of a scalar function against central
/// finite differences with step `h`.
///
/// `f` evaluates the function at a parameter setting, returning its value
/// and the analytic gradient tensors (typically by recording a tape and
/// calling backward). A non-finite value at a perturbed point surfaces as
/// a failure naming the offending parameter index.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("grad_check requires h > 0, got {h}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "loss at base point",
            index: 0,
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            context: "grad_check analytic gradient",
            expected: format!("{} tensors", params.len()),
            got: format!("{}", analytic.len()),
        });
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        components_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for ti in 0..params.len() {
        for k in 0..params[ti].data.len() {
            let orig = work[ti].data[k];

            work[ti].data[k] = orig + h;
            let (f_plus, _) = f(&work)?;
            work[ti].data[k] = orig - h;
            let (f_minus, _) = f(&work)?;
            work[ti].data[k] = orig;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss at perturbed point",
                    index: ti,
                });
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[ti].data[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, k));
            }
            report.components_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Tape, TapedMlp};
    use crate::diffcore::{Activation, MlpParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        // f(p) = Σ pᵢ² → analytic 2pᵢ; central differences exact for quadratics.
        let params = vec![Tensor::vector(vec![0.4, -1.3, 2.2])];
        let f = |p: &[Tensor]| {
            let mut tape = Tape::new();
            let x = tape.param(p[0].clone());
            let sq = tape.square(x);
            let loss = tape.sum(sq);
            let g = tape.backward(loss)?;
            Ok((
                tape.value(loss).item(),
                vec![g.get(x, tape.value(x))],
            ))
        };
        let rep = grad_check(f, &params, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-10, "err {}", rep.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = vec![Tensor::scalar(3.0)];
        let f = |_: &[Tensor]| Ok((7.5, vec![Tensor::scalar(0.0)]));
        let rep = grad_check(f, &params, 1e-5).unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn three_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let net = MlpParams::init(&[3, 4, 4, 1], Activation::Tanh, &mut rng);
        let input: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let flat = net.flatten();
        let activation = net.activation;

        let f = |p: &[Tensor]| {
            let mut m = MlpParams::zeros(&[3, 4, 4, 1], activation);
            m.assign(&mut p.iter().cloned());
            let mut tape = Tape::new();
            let taped = TapedMlp::record(&mut tape, &m);
            let x = tape.constant_vector(input.clone());
            let out = taped.apply(&mut tape, &[x])?;
            // loss = mean(tanh(out)²): exercises several primitives
            let t = tape.tanh(out);
            let sq = tape.square(t);
            let loss = tape.mean(sq);
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), taped.grads(&tape, &g)))
        };
        let rep = grad_check(f, &flat, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-6, "err {}", rep.max_rel_err);
    }

    #[test]
    fn non_finite_perturbed_loss_names_the_parameter() {
        // log(x) blows up when x crosses 0
        let params = vec![Tensor::scalar(0.5e-5)];
        let f = |p: &[Tensor]| {
            let mut tape = Tape::new();
            let x = tape.param(p[0].clone());
            let loss = tape.log(x);
            let g = tape.backward(loss)?;
            Ok((
                tape.value(loss).item(),
                vec![g.get(x, tape.value(x))],
            ))
        };
        match grad_check(f, &params, 1e-5) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
