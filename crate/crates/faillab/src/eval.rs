//! Synthetic expert targets and two-sample distribution metrics.
//!
//! Targets are samplable in closed form: per-conditioning Gaussian
//! mixtures, a checkerboard, and a bounded two-moons construction. Match
//! quality is measured with sliced 2-Wasserstein distance, energy
//! distance, per-mode coverage (collapse detection), and a discriminator
//! probe accuracy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adversary::Discriminator;
use crate::diffcore::sigmoid;
use crate::{Error, Result};

/// One Gaussian mixture component bound to a conditioning class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub cond: usize,
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-dimension standard deviation (diagonal covariance).
    pub std: Vec<f64>,
}

/// A samplable expert distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    GaussianMixture {
        dim: usize,
        conds: usize,
        components: Vec<MixtureComponent>,
    },
    /// Alternating cells of a `grid × grid` board over `[-extent, extent]²`.
    Checkerboard {
        grid: usize,
        extent: f64,
        conds: usize,
    },
    /// Two interleaved half-circles with bounded radial jitter; with
    /// conditioning arity 2, class selects the moon.
    TwoMoons {
        /// Radial jitter half-width; all mass stays within radius 1 ± width.
        width: f64,
        conds: usize,
    },
}

impl TargetSpec {
    pub fn dim(&self) -> usize {
        match self {
            TargetSpec::GaussianMixture { dim, .. } => *dim,
            TargetSpec::Checkerboard { .. } | TargetSpec::TwoMoons { .. } => 2,
        }
    }

    pub fn conds(&self) -> usize {
        match self {
            TargetSpec::GaussianMixture { conds, .. }
            | TargetSpec::Checkerboard { conds, .. }
            | TargetSpec::TwoMoons { conds, .. } => *conds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TargetSpec::GaussianMixture {
                dim,
                conds,
                components,
            } => {
                if components.is_empty() {
                    return Err(Error::Contract("mixture needs components".into()));
                }
                for c in 0..*conds {
                    let w: f64 = components
                        .iter()
                        .filter(|m| m.cond == c)
                        .map(|m| m.weight)
                        .sum();
                    if (w - 1.0).abs() > 1e-9 {
                        return Err(Error::Contract(format!(
                            "mixture weights for conditioning {c} sum to {w}, expected 1"
                        )));
                    }
                }
                for m in components {
                    if m.cond >= *conds {
                        return Err(Error::Contract(format!(
                            "component conditioning {} out of range (arity {conds})",
                            m.cond
                        )));
                    }
                    if m.mean.len() != *dim || m.std.len() != *dim {
                        return Err(Error::Shape {
                            context: "mixture component",
                            expected: format!("{dim}-dim mean/std"),
                            got: format!("{}/{}", m.mean.len(), m.std.len()),
                        });
                    }
                    if m.weight < 0.0 || m.std.iter().any(|s| *s <= 0.0) {
                        return Err(Error::Contract(
                            "mixture weights must be >= 0 and stds > 0".into(),
                        ));
                    }
                }
                Ok(())
            }
            TargetSpec::Checkerboard { grid, extent, conds } => {
                if *grid < 2 || *extent <= 0.0 || *conds != 1 {
                    return Err(Error::Contract(
                        "checkerboard needs grid >= 2, extent > 0, conds = 1".into(),
                    ));
                }
                Ok(())
            }
            TargetSpec::TwoMoons { width, conds } => {
                if !(0.0..1.0).contains(width) || !(*conds == 1 || *conds == 2) {
                    return Err(Error::Contract(
                        "two_moons needs width in [0,1) and conds in {1,2}".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Ball modes (center, radius) for coverage accounting: one per mixture
    /// component at 3σ_max. Empty for geometric targets.
    pub fn modes(&self, cond: usize) -> Vec<(Vec<f64>, f64)> {
        match self {
            TargetSpec::GaussianMixture { components, .. } => components
                .iter()
                .filter(|m| m.cond == cond)
                .map(|m| {
                    let r = 3.0 * m.std.iter().cloned().fold(0.0_f64, f64::max);
                    (m.mean.clone(), r)
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Expert mixture weights aligned with [`TargetSpec::modes`].
    pub fn mode_weights(&self, cond: usize) -> Vec<f64> {
        match self {
            TargetSpec::GaussianMixture { components, .. } => components
                .iter()
                .filter(|m| m.cond == cond)
                .map(|m| m.weight)
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Draw `n` i.i.d. points from the target for one conditioning class.
/// Deterministic given `seed`.
pub fn sample_expert(
    target: &TargetSpec,
    n: usize,
    cond: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_expert_with(target, n, cond, &mut rng)
}

/// As [`sample_expert`], drawing from a caller-owned stream.
pub fn sample_expert_with(
    target: &TargetSpec,
    n: usize,
    cond: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    if n < 1 {
        return Err(Error::Contract("sample_expert requires n >= 1".into()));
    }
    if cond >= target.conds() {
        return Err(Error::Contract(format!(
            "conditioning class {cond} out of range (arity {})",
            target.conds()
        )));
    }
    let mut out = Vec::with_capacity(n);
    match target {
        TargetSpec::GaussianMixture { components, .. } => {
            let comps: Vec<&MixtureComponent> =
                components.iter().filter(|m| m.cond == cond).collect();
            for _ in 0..n {
                let mut u: f64 = rng.gen_range(0.0..1.0);
                let mut pick = comps[comps.len() - 1];
                for m in &comps {
                    if u < m.weight {
                        pick = m;
                        break;
                    }
                    u -= m.weight;
                }
                let p = pick
                    .mean
                    .iter()
                    .zip(&pick.std)
                    .map(|(&mu, &s)| mu + s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                out.push(p);
            }
        }
        TargetSpec::Checkerboard { grid, extent, .. } => {
            let cells: Vec<(usize, usize)> = (0..*grid)
                .flat_map(|i| (0..*grid).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            let cell_w = 2.0 * extent / *grid as f64;
            for _ in 0..n {
                let (i, j) = cells[rng.gen_range(0..cells.len())];
                let x = -extent + i as f64 * cell_w + rng.gen_range(0.0..cell_w);
                let y = -extent + j as f64 * cell_w + rng.gen_range(0.0..cell_w);
                out.push(vec![x, y]);
            }
        }
        TargetSpec::TwoMoons { width, conds } => {
            for _ in 0..n {
                let moon = if *conds == 2 {
                    cond
                } else {
                    usize::from(rng.gen_range(0.0..1.0) < 0.5)
                };
                let phi = rng.gen_range(0.0..std::f64::consts::PI);
                let r = 1.0 + rng.gen_range(-*width..*width);
                let p = if moon == 0 {
                    vec![r * phi.cos(), r * phi.sin()]
                } else {
                    vec![1.0 - r * phi.cos(), 0.5 - r * phi.sin()]
                };
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Axis-aligned bounding box implied by the two-moons construction.
pub fn two_moons_bounding_box(width: f64) -> ([f64; 2], [f64; 2]) {
    let r = 1.0 + width;
    ([-r, 1.0 + r], [0.5 - r, r])
}

/// A batch with conditioning classes drawn uniformly, one point each.
pub fn sample_conditioned_batch(
    target: &TargetSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Vec<f64>, usize)>> {
    let conds = target.conds();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let cond = if conds == 1 { 0 } else { rng.gen_range(0..conds) };
        let p = sample_expert_with(target, 1, cond, rng)?.pop().expect("one point");
        out.push((p, cond));
    }
    Ok(out)
}

/// Mean over random unit directions of the 1-D 2-Wasserstein distance
/// between the projected empirical distributions. Requires equal sizes so
/// the 1-D distance is the exact sort-and-difference form.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], n_proj: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "sliced_wasserstein requires equal sizes, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() || n_proj < 1 {
        return Err(Error::Contract(
            "sliced_wasserstein requires non-empty sets and n_proj >= 1".into(),
        ));
    }
    let d = a[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = a.len();
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir[0] = 1.0;
        } else {
            for v in &mut dir {
                *v /= norm;
            }
        }
        for (i, p) in a.iter().enumerate() {
            pa[i] = p.iter().zip(&dir).map(|(x, w)| x * w).sum();
        }
        for (i, p) in b.iter().enumerate() {
            pb[i] = p.iter().zip(&dir).map(|(x, w)| x * w).sum();
        }
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        let w2_sq = pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
        total += w2_sq.sqrt();
    }
    Ok(total / n_proj as f64)
}

/// Energy distance `2·E‖a−b‖ − E‖a−a'‖ − E‖b−b'‖` via all-pairs means.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(
            "energy_distance requires non-empty sets".into(),
        ));
    }
    let dist = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut cross = 0.0;
    for p in a {
        for q in b {
            cross += dist(p, q);
        }
    }
    cross /= (a.len() * b.len()) as f64;
    let mut within_a = 0.0;
    for p in a {
        for q in a {
            within_a += dist(p, q);
        }
    }
    within_a /= (a.len() * a.len()) as f64;
    let mut within_b = 0.0;
    for p in b {
        for q in b {
            within_b += dist(p, q);
        }
    }
    within_b /= (b.len() * b.len()) as f64;
    Ok(2.0 * cross - within_a - within_b)
}

/// Per-mode occupancy fractions. A sample counts toward the nearest mode
/// center among those whose ball contains it, so fractions sum to at most 1.
pub fn mode_coverage(samples: &[Vec<f64>], modes: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Contract("mode_coverage requires samples".into()));
    }
    if modes.iter().any(|(_, r)| *r <= 0.0) {
        return Err(Error::Contract("mode radii must be positive".into()));
    }
    let mut hits = vec![0usize; modes.len()];
    for s in samples {
        let mut best: Option<(usize, f64)> = None;
        for (k, (center, radius)) in modes.iter().enumerate() {
            let d = s
                .iter()
                .zip(center)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>()
                .sqrt();
            if d <= *radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        if let Some((k, _)) = best {
            hits[k] += 1;
        }
    }
    Ok(hits
        .iter()
        .map(|&h| h as f64 / samples.len() as f64)
        .collect())
}

/// Default threshold below which an expert-weighted mode counts as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.02;

/// Balanced held-out classification accuracy of the discriminator,
/// thresholding σ(logit) at 0.5. Ties classify as expert.
pub fn disc_probe_accuracy(
    disc: &Discriminator,
    expert: &[(Vec<f64>, usize)],
    policy: &[(Vec<f64>, usize)],
) -> Result<f64> {
    if expert.is_empty() || policy.is_empty() {
        return Err(Error::Contract(
            "disc_probe_accuracy requires non-empty sets".into(),
        ));
    }
    let mut correct = 0usize;
    for (x, c) in expert {
        if sigmoid(disc.logit(x, *c)?) >= 0.5 {
            correct += 1;
        }
    }
    for (x, c) in policy {
        if sigmoid(disc.logit(x, *c)?) < 0.5 {
            correct += 1;
        }
    }
    Ok(correct as f64 / (expert.len() + policy.len()) as f64)
}

/// Metric snapshot emitted at evaluation cadence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sliced_wasserstein: f64,
    pub energy_distance: f64,
    pub mode_coverage: Vec<f64>,
    pub disc_probe_accuracy: Option<f64>,
    pub collapse: bool,
    pub sample_count: usize,
    pub seed: u64,
}
