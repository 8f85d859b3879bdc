//! Numerical invariant suites shared by the `check` command and the
//! acceptance tests. Each returns one [`CheckResult`] per property.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dynamics::{self, PendulumParams, PendulumSetup};
use crate::error::Result;
use crate::inference::{
    exact_posterior_fit, full_batch, pathwise_posterior_sample, svgp_elbo, svgp_initial_state, svgp_predict,
    SvgpState, VectorObservationSet,
};
use crate::linalg::stack;
use crate::manifold::Manifold;
use crate::projected::{gauge_independence_report, sample_prior_field, MatrixKernel, ProjectedKernel, VectorField};
use crate::seed;
use crate::spectral::{AnyScalarKernel, KernelFamily};
use crate::wind::{self, WindModelConfig};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, value: f64, threshold: impl Into<String>, passed: bool) -> Self {
        CheckResult {
            name: name.into(),
            value,
            threshold: threshold.into(),
            passed,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

fn kernel(manifold: Manifold, family: KernelFamily, ls: &[f64]) -> Result<ProjectedKernel<AnyScalarKernel>> {
    Ok(ProjectedKernel::new(AnyScalarKernel::build(&manifold, family, ls, 1.0, None)?))
}

/// The sphere, cylinder and torus kernels the invariants are checked on.
pub fn reference_kernels() -> Result<Vec<ProjectedKernel<AnyScalarKernel>>> {
    Ok(vec![
        kernel(Manifold::Sphere, KernelFamily::Matern32, &[0.4])?,
        kernel(Manifold::cylinder(), KernelFamily::SquaredExponential, &[0.3, 1.2])?,
        kernel(Manifold::torus(), KernelFamily::Matern52, &[0.8])?,
    ])
}

/// 10 point pairs × 10 gauges per manifold.
pub fn gauge_independence(seed_value: u64) -> Result<Vec<CheckResult>> {
    reference_kernels()?
        .iter()
        .map(|k| {
            let dev = gauge_independence_report(k, 10, 10, seed_value)?;
            Ok(CheckResult::new(format!("gauge independence ({})", k.manifold()), dev, "<= 1e-10", dev <= 1e-10))
        })
        .collect()
}

pub fn metric_identity(seed_value: u64, points: usize) -> Result<Vec<CheckResult>> {
    let manifolds = [
        Manifold::Circle,
        Manifold::Sphere,
        Manifold::torus(),
        Manifold::cylinder(),
        Manifold::Euclidean(3),
    ];
    manifolds
        .iter()
        .map(|m| {
            let mut rng = seed::rng_for(seed_value, "metric-identity");
            let mut worst: f64 = 0.0;
            for _ in 0..points {
                let x = m.sample_point(&mut rng);
                let p = m.projection_matrix(&x)?;
                let g = &p * p.transpose() - DMatrix::identity(p.nrows(), p.nrows());
                worst = worst.max(g.amax());
            }
            Ok(CheckResult::new(format!("P P^T = I ({m})"), worst, "<= 1e-12", worst <= 1e-12))
        })
        .collect()
}

/// Smallest eigenvalue relative to the largest over 20 random block Grams.
pub fn psd(seed_value: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for k in reference_kernels()? {
        let mut rng = seed::rng_for(seed_value, "psd");
        let mut worst = f64::INFINITY;
        for trial in 0..20 {
            let n = 5 + trial;
            let xs: Vec<Vec<f64>> = (0..n).map(|_| k.manifold().sample_point(&mut rng)).collect();
            let e = k.gram(&xs)?.symmetric_eigen().eigenvalues;
            worst = worst.min(e.min() / e.max());
        }
        out.push(CheckResult::new(format!("PSD ({})", k.manifold()), worst, ">= -1e-8", worst >= -1e-8));
    }
    Ok(out)
}

/// Mean and standard error of the sample mean.
fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo cross-covariance of sampled fields (fresh features per sample)
/// against the kernel at 5 fixed point pairs on the cylinder, where the map
/// combines random Fourier features with the circle's eigenfunctions.
pub fn feature_map_fidelity(seed_value: u64, samples: usize) -> Result<CheckResult> {
    let k = kernel(Manifold::cylinder(), KernelFamily::SquaredExponential, &[0.3, 1.2])?;
    let pairs = [
        ([0.1, 0.0], [0.1, 0.0]),
        ([0.1, 0.0], [0.4, 0.5]),
        ([6.2, -0.3], [0.05, 0.2]),
        ([3.0, 1.0], [2.7, 0.4]),
        ([1.5, -1.5], [1.8, -1.0]),
    ];
    let draws: Vec<Vec<(DVector<f64>, DVector<f64>)>> = {
        use rayon::prelude::*;
        (0..samples as u64)
            .into_par_iter()
            .map(|s| {
                let f = sample_prior_field(&k, 256, seed::derive_index(seed_value, s))?;
                pairs.iter().map(|(x, y)| Ok((f.eval(x)?, f.eval(y)?))).collect()
            })
            .collect::<Result<_>>()?
    };
    let mut worst: f64 = 0.0;
    for (p, (x, y)) in pairs.iter().enumerate() {
        let target = k.eval(x, y)?;
        for i in 0..2 {
            for j in 0..2 {
                let prods: Vec<f64> = draws.iter().map(|d| d[p].0[i] * d[p].1[j]).collect();
                let (m, se) = moments(&prods);
                worst = worst.max((m - target[(i, j)]).abs() / se.max(1e-15));
            }
        }
    }
    Ok(CheckResult::new("feature-map covariance (cylinder)", worst, "z <= 3", worst <= 3.0)
        .with_detail(format!("{samples} fields, 5 pairs, worst |z|")))
}

fn sphere_problem(n: usize, noise: f64, seed_value: u64) -> Result<(ProjectedKernel<AnyScalarKernel>, VectorObservationSet)> {
    let k = ProjectedKernel::new(AnyScalarKernel::build(&Manifold::Sphere, KernelFamily::Matern32, &[0.6], 1.0, Some(256))?);
    let truth = sample_prior_field(&k, 1, seed::derive(seed_value, "truth"))?;
    let mut rng = seed::rng_for(seed_value, "points");
    let points: Vec<Vec<f64>> = (0..n).map(|_| Manifold::Sphere.sample_point(&mut rng)).collect();
    let values = points
        .iter()
        .map(|x| {
            let v = truth.eval(x)?;
            Ok(v.map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                c + noise.sqrt() * z
            }))
        })
        .collect::<Result<_>>()?;
    Ok((k, VectorObservationSet::new(points, values, noise)?))
}

/// Pathwise posterior samples against the exact posterior mean and joint
/// covariance at 5 test points.
pub fn pathwise_vs_exact(seed_value: u64, samples: usize) -> Result<CheckResult> {
    let (k, obs) = sphere_problem(8, 0.05, seed_value)?;
    let post = exact_posterior_fit(&k, obs)?;
    let mut rng = seed::rng_for(seed_value, "test-points");
    let xs: Vec<Vec<f64>> = (0..5).map(|_| Manifold::Sphere.sample_point(&mut rng)).collect();
    let (means, _) = post.predict(&xs)?;
    let mean = stack(&means);
    let cov = post.joint_covariance(&xs)?;
    let draws: Vec<DVector<f64>> = {
        use rayon::prelude::*;
        (0..samples as u64)
            .into_par_iter()
            .map(|s| {
                let prior = sample_prior_field(&k, 1, seed::derive_index(seed_value, s))?;
                let f = pathwise_posterior_sample(&post, prior, seed::derive_index(seed::derive(seed_value, "pathwise"), s))?;
                Ok(stack(&xs.iter().map(|x| f.eval(x)).collect::<Result<Vec<_>>>()?))
            })
            .collect::<Result<_>>()?
    };
    let n = mean.len();
    let column = |i: usize| draws.iter().map(|v| v[i]).collect::<Vec<_>>();
    let emp: Vec<(f64, f64)> = (0..n).map(|i| moments(&column(i))).collect();
    let mut mean_z: f64 = 0.0;
    for i in 0..n {
        mean_z = mean_z.max((emp[i].0 - mean[i]).abs() / emp[i].1);
    }
    let mut cov_z: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            let prods: Vec<f64> = draws.iter().map(|v| (v[i] - emp[i].0) * (v[j] - emp[j].0)).collect();
            let (c, se) = moments(&prods);
            cov_z = cov_z.max((c - cov[(i, j)]).abs() / se.max(1e-15));
        }
    }
    let worst = mean_z.max(cov_z);
    Ok(CheckResult::new("pathwise vs exact posterior", worst, "z <= 3", worst <= 3.0)
        .with_detail(format!("{samples} samples; mean z {mean_z:.2}, cov z {cov_z:.2}")))
}

/// Sparse model with `z = x`, `μ = y`, `Σ = σ²I` against the exact posterior,
/// and the ELBO bound for several inducing-set sizes.
pub fn svgp_sanity(seed_value: u64) -> Result<Vec<CheckResult>> {
    let (k, obs) = sphere_problem(100, 0.05, seed_value)?;
    let post = exact_posterior_fit(&k, obs.clone())?;
    let d = obs.dim();
    let state = SvgpState::new(
        &Manifold::Sphere,
        obs.points().to_vec(),
        obs.stacked_values(),
        &vec![DMatrix::identity(d, d) * obs.noise_variance(); obs.len()],
        obs.noise_variance(),
    )?;
    let mut rng = seed::rng_for(seed_value, "svgp-test-points");
    let xs: Vec<Vec<f64>> = (0..50).map(|_| Manifold::Sphere.sample_point(&mut rng)).collect();
    let (em, ec) = post.predict(&xs)?;
    let (sm, sc) = svgp_predict(&state, &k, &xs)?;
    let mut dev: f64 = 0.0;
    for i in 0..xs.len() {
        dev = dev.max((&em[i] - &sm[i]).amax()).max((&ec[i] - &sc[i]).amax());
    }
    let lml = post.log_marginal_likelihood();
    let batch = full_batch(&obs);
    let mut min_gap = lml - svgp_elbo(&state, &k, &obs, &batch)?;
    for m in [5, 20, 50] {
        let s = svgp_initial_state(&k, &obs, m, seed_value)?;
        min_gap = min_gap.min(lml - svgp_elbo(&s, &k, &obs, &batch)?);
    }
    let tol = 1e-8 * lml.abs().max(1.0);
    Ok(vec![
        CheckResult::new("sparse model with z = x is exact", dev, "<= 1e-8", dev <= 1e-8),
        CheckResult::new("ELBO <= log marginal likelihood", min_gap, ">= -1e-8 |lml|", min_gap >= -tol)
            .with_detail(format!("n = 100, m in {{5, 20, 50, 100}}; rounding tolerance {tol:.1e}")),
    ])
}

/// Step-halving ratio of the final-state error against an `h/8` reference,
/// and frictionless secular energy drift over 10⁴ steps.
pub fn leapfrog() -> Result<Vec<CheckResult>> {
    let params = PendulumParams::default();
    let final_state = |h: f64| -> Result<(f64, f64)> {
        let p = PendulumParams { step: h, ..params };
        let n = (5.0 / h).round() as usize + 1;
        Ok(*dynamics::leapfrog_rollout(&p, 2.0, 0.0, n)?.states.last().unwrap())
    };
    let err = |a: (f64, f64), b: (f64, f64)| {
        (crate::manifold::wrapped_difference(a.0, b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    };
    let reference = final_state(params.step / 8.0)?;
    let ratio = err(final_state(params.step)?, reference) / err(final_state(params.step / 2.0)?, reference);
    let frictionless = PendulumParams { friction: 0.0, ..params };
    let t = dynamics::leapfrog_rollout(&frictionless, 2.0, 0.0, 10_001)?;
    let drift = dynamics::energy_drift(&frictionless, &t, 1000)?;
    Ok(vec![
        CheckResult::new("leapfrog order (error ratio)", ratio, "in [3.5, 4.5]", (3.5..=4.5).contains(&ratio))
            .with_detail("b = 0.2, h = 0.01 vs 0.005 against h/8"),
        CheckResult::new("leapfrog energy drift", drift, "<= 1e-4", drift <= 1e-4)
            .with_detail("b = 0, 10^4 steps, windowed mean H (1000 steps)"),
    ])
}

/// Seam gap of the learned mean fields at `q = 2π − 10⁻³` vs `q = 10⁻³`.
pub fn pendulum_seam() -> Result<Vec<CheckResult>> {
    let report = dynamics::pendulum_seam_report(&PendulumSetup::default(), 1e-3)?;
    Ok(vec![
        CheckResult::new("pendulum seam (manifold)", report.manifold, "<= 1e-2", report.manifold <= 1e-2)
            .with_detail(format!("true field's own gap {:.4}", report.truth)),
        CheckResult::new("pendulum seam (baseline)", report.euclidean, ">= 1e-1", report.euclidean >= 0.1),
    ])
}

/// Seam, track-uncertainty and RMSE comparisons over synthetic seeds.
pub fn wind(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let cfg = WindModelConfig::default();
    let runs: Vec<wind::WindMetrics> = {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&s| wind::run_synthetic(s, &cfg, 60).map(|r| r.metrics))
            .collect::<Result<_>>()?
    };
    let min_seam_ratio = runs
        .iter()
        .map(|m| m.baseline_seam / m.manifold_seam.max(f64::MIN_POSITIVE))
        .fold(f64::INFINITY, f64::min);
    let max_cv = runs.iter().map(|m| m.manifold_track_cv).fold(0.0, f64::max);
    let wins = runs.iter().filter(|m| m.manifold_rmse <= m.baseline_rmse).count();
    let needed = (seeds.len() * 4).div_ceil(5);
    Ok(vec![
        CheckResult::new("wind seam ratio (baseline / manifold)", min_seam_ratio, ">= 10", min_seam_ratio >= 10.0)
            .with_detail(format!("minimum over {} seeds", seeds.len())),
        CheckResult::new("wind track std CV (manifold)", max_cv, "<= 0.2", max_cv <= 0.2)
            .with_detail(format!("maximum over {} seeds", seeds.len())),
        CheckResult::new("wind RMSE wins (manifold)", wins as f64, format!(">= {needed} of {}", seeds.len()), wins >= needed),
    ])
}

/// The invariant suite run by the `check` command.
pub fn invariant_suite(seed_value: u64) -> Result<Vec<CheckResult>> {
    let mut out = gauge_independence(seed_value)?;
    out.extend(metric_identity(seed_value, 1000)?);
    out.extend(psd(seed_value)?);
    out.push(feature_map_fidelity(seed_value, 4096)?);
    out.push(pathwise_vs_exact(seed_value, 8192)?);
    out.extend(svgp_sanity(seed_value)?);
    out.extend(leapfrog()?);
    Ok(out)
}
