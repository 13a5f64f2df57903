//! The built-in invariant and gradient-check suite behind `faillab check`.
//! Fast, deterministic, and independent of any run artifacts: exercises
//! every tape primitive against central finite differences, the
//! denoise/sampler exactness identities, the optimizer contracts, and the
//! algebraic identities of the surrogate machinery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adversary::{sigma_max_dense, spectral_normalize};
use crate::diffcore::{
    adamw_step, clip_global_norm, grad_check, AdamHyper, AdamState, Activation, MlpParams, Shape,
    Tape, TapedMlp, Tensor,
};
use crate::fail_pg::{fpo_loss_value, fpo_ratio_value, grpo_advantages, kl_estimate_value};
use crate::flow::{
    euler_sample, interpolate, single_step_denoise, TapedVectorField, VectorField,
    DENOISE_T_MARGIN,
};
use crate::Result;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match run() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Run every check; callers decide what to do with failures.
pub fn run_check_suite() -> Vec<CheckResult> {
    vec![
        check("primitive-gradients-vs-finite-differences", primitives_fd),
        check("mlp-backward-vs-finite-differences", mlp_fd),
        check("interpolate-endpoints", interpolate_endpoints),
        check("denoise-exactness-grid", denoise_exactness),
        check("euler-oracle-path-consistency", euler_oracle),
        check("adamw-contracts", adamw_contracts),
        check("clip-global-norm-contract", clip_contract),
        check("fpo-ratio-identity", fpo_identity),
        check("kl-self-estimate-zero", kl_self_zero),
        check("grpo-standardization", grpo_checks),
        check("fpo-loss-clip-contract", fpo_clip_contract),
        check("spectral-norm-vs-dense-svd", spectral_oracle),
    ]
}

fn primitives_fd() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    // each primitive wrapped into a scalar loss; 100 random points apiece
    type Builder = fn(&mut Tape, usize) -> Result<usize>;
    let builders: Vec<(&str, Builder, std::ops::Range<f64>)> = vec![
        ("tanh", |t, x| Ok(t.tanh(x)), -2.0..2.0),
        ("relu", |t, x| Ok(t.relu(x)), -2.0..2.0),
        ("sigmoid", |t, x| Ok(t.sigmoid(x)), -4.0..4.0),
        ("log_sigmoid", |t, x| Ok(t.log_sigmoid(x)), -4.0..4.0),
        ("log", |t, x| Ok(t.log(x)), 0.2..3.0),
        ("exp", |t, x| Ok(t.exp(x)), -2.0..2.0),
        ("square", |t, x| Ok(t.square(x)), -2.0..2.0),
        ("scale", |t, x| Ok(t.scale(x, -1.7)), -2.0..2.0),
        ("norm2", |t, x| Ok(t.norm2(x)), 0.5..2.0),
        (
            "mul-self",
            |t, x| {
                let y = t.mul(x, x)?;
                Ok(y)
            },
            -2.0..2.0,
        ),
    ];
    for (name, build, range) in &builders {
        for _ in 0..100 {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(range.clone())).collect();
            let params = vec![Tensor::vector(v)];
            let rep = grad_check(
                |p: &[Tensor]| {
                    let mut tape = Tape::new();
                    let x = tape.param(p[0].clone());
                    let node = build(&mut tape, x)?;
                    let loss = if tape.value(node).shape == Shape::Scalar {
                        node
                    } else {
                        tape.sum(node)
                    };
                    let g = tape.backward(loss)?;
                    Ok((tape.value(loss).item(), vec![g.get(x, tape.value(x))]))
                },
                &params,
                1e-5,
            )?;
            if rep.max_rel_err > worst {
                worst = rep.max_rel_err;
            }
            if rep.max_rel_err >= 1e-6 {
                return Ok((false, format!("{name}: rel err {}", rep.max_rel_err)));
            }
        }
    }
    // relu's kink can false-fail finite differences at the origin; the
    // random ranges above avoid it, so every primitive must clear 1e-6.
    Ok((true, format!("max rel err {worst:.2e} across primitives")))
}

fn mlp_fd() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let net = MlpParams::init(&[3, 5, 4, 1], Activation::Tanh, &mut rng);
    let input: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let flat = net.flatten();
    let rep = grad_check(
        |p: &[Tensor]| {
            let mut m = MlpParams::zeros(&[3, 5, 4, 1], Activation::Tanh);
            m.assign(&mut p.iter().cloned());
            let mut tape = Tape::new();
            let taped = TapedMlp::record(&mut tape, &m);
            let x = tape.constant_vector(input.clone());
            let out = taped.apply(&mut tape, &[x])?;
            let loss = tape.mean(out);
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), taped.grads(&tape, &g)))
        },
        &flat,
        1e-5,
    )?;
    Ok((
        rep.max_rel_err < 1e-6,
        format!("rel err {:.2e}", rep.max_rel_err),
    ))
}

fn interpolate_endpoints() -> Result<(bool, String)> {
    let x0 = vec![1.25, -3.5];
    let eps = vec![0.5, 2.0];
    let at0 = interpolate(&x0, &eps, 0.0)?;
    let at1 = interpolate(&x0, &eps, 1.0)?;
    Ok((at0 == x0 && at1 == eps, "t=0 ↦ x0, t=1 ↦ ε, exact".into()))
}

fn denoise_exactness() -> Result<(bool, String)> {
    // forced conditional velocity recovers x0 over a (t, Δt) grid
    let x0 = vec![0.7, -0.4];
    let eps = vec![-1.1, 0.6];
    let v: Vec<f64> = eps.iter().zip(&x0).map(|(e, a)| e - a).collect();
    let vf = VectorField::constant_field(2, &v, 1);
    let mut max_err: f64 = 0.0;
    let mut count = 0;
    for i in 0..10 {
        let delta_t = 0.02 + 0.08 * i as f64 / 9.0;
        for j in 0..10 {
            let hi = 1.0 - delta_t - DENOISE_T_MARGIN - 1e-9;
            let t = hi * j as f64 / 9.0;
            let mut tape = Tape::new();
            let tvf = TapedVectorField::record(&mut tape, &vf);
            let node = single_step_denoise(&mut tape, &tvf, &x0, &eps, t, delta_t, 0)?;
            for (k, &want) in x0.iter().enumerate() {
                max_err = max_err.max((tape.value(node).data[k] - want).abs());
            }
            count += 1;
        }
    }
    Ok((
        max_err < 1e-9 && count == 100,
        format!("max abs err {max_err:.2e} over {count} grid points"),
    ))
}

fn euler_oracle() -> Result<(bool, String)> {
    let x0 = vec![1.5, -0.25];
    let eps = vec![-0.4, 0.9];
    let v: Vec<f64> = eps.iter().zip(&x0).map(|(e, a)| e - a).collect();
    let vf = VectorField::constant_field(2, &v, 1);
    let mut max_err: f64 = 0.0;
    for n in [1, 7, 28] {
        let out = euler_sample(&vf, &eps, 0, n)?;
        for k in 0..2 {
            max_err = max_err.max((out[k] - x0[k]).abs());
        }
    }
    Ok((max_err < 1e-9, format!("max abs err {max_err:.2e}")))
}

fn adamw_contracts() -> Result<(bool, String)> {
    // hand-evaluated first step
    let mut p = vec![Tensor::scalar(1.0)];
    let g = vec![Tensor::scalar(1.0)];
    let mut st = AdamState::new(&p, AdamHyper::with_lr(0.1));
    adamw_step(&mut p, &g, &mut st)?;
    let first_ok = (p[0].item() - 0.9).abs() < 1e-7;

    // lr = 0 is the identity
    let mut q = vec![Tensor::scalar(2.5)];
    let mut st0 = AdamState::new(&q, AdamHyper::with_lr(0.0));
    adamw_step(&mut q, &g, &mut st0)?;
    let identity_ok = q[0].item() == 2.5;

    Ok((
        first_ok && identity_ok,
        format!("first step → {}, lr=0 identity {}", p[0].item(), identity_ok),
    ))
}

fn clip_contract() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..50 {
        let mut g = vec![Tensor::vector(
            (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )];
        let max_norm = rng.gen_range(0.5..2.0);
        clip_global_norm(&mut g, max_norm)?;
        let norm = g[0].data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > max_norm + 1e-12 {
            return Ok((false, format!("post-clip norm {norm} > {max_norm}")));
        }
    }
    Ok((true, "post-clip norm ≤ max_norm + 1e-12".into()))
}

fn fpo_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let vf = VectorField::init(2, &[6], Activation::Tanh, 1, 4, 4, &mut rng);
    let draws: Vec<(f64, Vec<f64>)> = (0..4)
        .map(|_| {
            let t = rng.gen_range(0.0..1.0);
            let eps = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            (t, eps)
        })
        .collect();
    let (r, _) = fpo_ratio_value(&vf, &vf, &[0.3, -0.8], 0, &draws)?;
    Ok((r == 1.0, format!("ratio at θ_old = {r}")))
}

fn kl_self_zero() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let vf = VectorField::init(2, &[6], Activation::Tanh, 1, 4, 4, &mut rng);
    let samples = vec![(vec![0.4, 0.2], 0), (vec![-0.9, 1.1], 0)];
    let draws: Vec<Vec<(f64, Vec<f64>)>> = (0..2)
        .map(|_| {
            (0..4)
                .map(|_| {
                    let t = rng.gen_range(0.0..1.0);
                    let eps = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                    (t, eps)
                })
                .collect()
        })
        .collect();
    let kl = kl_estimate_value(&vf, &vf, &samples, &draws)?;
    Ok((kl == 0.0, format!("self-KL = {kl}")))
}

fn grpo_checks() -> Result<(bool, String)> {
    let a = grpo_advantages(&[1.0, 2.0, 3.0], 1e-8)?;
    let hand_ok = (a[0] + 1.224744871391589).abs() < 1e-12 && a[1].abs() < 1e-12;
    let degenerate = grpo_advantages(&[5.0, 5.0, 5.0], 1e-8)? == vec![0.0; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut stat_ok = true;
    for _ in 0..50 {
        let r: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let adv = grpo_advantages(&r, 1e-8)?;
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let var = adv.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / adv.len() as f64;
        stat_ok &= mean.abs() < 1e-12 && (var.sqrt() - 1.0).abs() < 1e-9;
    }
    Ok((
        hand_ok && degenerate && stat_ok,
        "hand case, degenerate case, mean 0 / std 1".into(),
    ))
}

fn fpo_clip_contract() -> Result<(bool, String)> {
    let cases = [
        (1.5, 1.0, 0.2, 1.2),
        (1.5, -1.0, 0.2, -1.5),
        (1.0, 0.3, 0.2, 0.3),
    ];
    for (r, a, e, want) in cases {
        let got = fpo_loss_value(r, a, e);
        if (got - want).abs() > 1e-15 {
            return Ok((false, format!("fpo_loss({r},{a},{e}) = {got}, want {want}")));
        }
    }
    Ok((true, "upper clip, pessimistic branch, trust-region center".into()))
}

fn spectral_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut w = Tensor::matrix(4, 4, data)?;
        let mut u = vec![0.5; 4];
        spectral_normalize(&mut w, &mut u, 30);
        worst = worst.max((sigma_max_dense(&w) - 1.0).abs());
    }
    Ok((
        worst < 1e-3,
        format!("worst |σ_max - 1| = {worst:.2e} after 30 iterations"),
    ))
}
