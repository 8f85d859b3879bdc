//! Damped pendulum on the cylinder S¹ × ℝ: ground truth, leapfrog
//! integration, training data from observed angles, and GP field rollouts.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{GvfError, Result};
use crate::inference::{svgp_mean_field, SvgpState, VectorObservationSet};
use crate::manifold::{reduce_periodic, wrapped_difference, Manifold};
use crate::projected::{MatrixKernel, ProjectedKernel, VectorField};
use crate::seed;
use crate::spectral::{AnyScalarKernel, KernelFamily};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub friction: f64,
    pub step: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 9.8,
            friction: 0.2,
            step: 0.01,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [("mass", self.mass), ("length", self.length), ("gravity", self.gravity), ("step", self.step)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GvfError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.friction >= 0.0) || !self.friction.is_finite() {
            return Err(GvfError::Config(format!("friction must be nonnegative, got {}", self.friction)));
        }
        Ok(())
    }

    pub fn inertia(&self) -> f64 {
        self.mass * self.length * self.length
    }
}

/// `(dq/dt, dp/dt) = (p / (m l²), −m g l sin q − (b/m) p)`.
pub fn pendulum_field(params: &PendulumParams, q: f64, p: f64) -> (f64, f64) {
    let dq = p / params.inertia();
    let dp = -params.mass * params.gravity * params.length * q.sin() - params.friction / params.mass * p;
    (dq, dp)
}

/// `H = p² / (2 m l²) + m g l (1 − cos q)`.
pub fn hamiltonian(params: &PendulumParams, q: f64, p: f64) -> f64 {
    p * p / (2.0 * params.inertia()) + params.mass * params.gravity * params.length * (1.0 - q.cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `(q, p)` with `q` reduced into `[0, 2π)`.
    pub states: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn positions(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.0).collect()
    }

    /// Writes `t,q,p` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["t", "q", "p"]).map_err(|e| csv_error(path, e))?;
        for (t, (q, p)) in self.times.iter().zip(&self.states) {
            w.write_record([t.to_string(), q.to_string(), p.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| GvfError::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> GvfError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GvfError::io(path, io),
        other => GvfError::Format {
            row: 0,
            message: format!("{other:?}"),
        },
    }
}

const MAX_KICK_ITERATIONS: usize = 100;

/// One kick–drift–kick step of `(q̇, ṗ) = (v_q(q, p), v_p(q, p))`.
///
/// The opening half kick is explicit in `p` and the closing one implicit
/// (solved by fixed-point iteration), so the step is the symmetric
/// composition of a half step with its adjoint. With a momentum-dependent
/// force such as friction, an explicit closing kick drops the scheme to
/// first order.
pub fn leapfrog_step<F>(field: &mut F, q: f64, p: f64, h: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64, f64) -> Result<(f64, f64)>,
{
    let p_half = p + 0.5 * h * field(q, p)?.1;
    let q_next = q + h * field(q, p_half)?.0;
    let mut p_next = p_half + 0.5 * h * field(q_next, p_half)?.1;
    for _ in 0..MAX_KICK_ITERATIONS {
        let updated = p_half + 0.5 * h * field(q_next, p_next)?.1;
        if !updated.is_finite() {
            return Err(GvfError::Divergence { step: 0 });
        }
        let done = (updated - p_next).abs() <= 4.0 * f64::EPSILON * updated.abs().max(f64::MIN_POSITIVE);
        p_next = updated;
        if done {
            break;
        }
    }
    Ok((q_next, p_next))
}

/// Integrates a field from `(q0, p0)` for `steps` states (including the start).
pub fn integrate<F>(mut field: F, q0: f64, p0: f64, steps: usize, h: f64) -> Result<Trajectory>
where
    F: FnMut(f64, f64) -> Result<(f64, f64)>,
{
    if steps == 0 {
        return Err(GvfError::Config("a rollout needs at least one step".into()));
    }
    if !q0.is_finite() || !p0.is_finite() {
        return Err(GvfError::Divergence { step: 0 });
    }
    let mut times = Vec::with_capacity(steps);
    let mut states = Vec::with_capacity(steps);
    // The field only ever sees angles in [0, 2π), which matters for the flat
    // baseline model.
    let mut reduced = |q: f64, p: f64| field(reduce_periodic(q, TAU), p);
    let (mut q, mut p) = (reduce_periodic(q0, TAU), p0);
    for i in 0..steps {
        times.push(i as f64 * h);
        states.push((q, p));
        if i + 1 == steps {
            break;
        }
        let next = leapfrog_step(&mut reduced, q, p, h).map_err(|e| match e {
            GvfError::Divergence { .. } => GvfError::Divergence { step: i + 1 },
            other => other,
        })?;
        if !next.0.is_finite() || !next.1.is_finite() {
            return Err(GvfError::Divergence { step: i + 1 });
        }
        (q, p) = (reduce_periodic(next.0, TAU), next.1);
    }
    Ok(Trajectory { times, states })
}

pub fn leapfrog_rollout(params: &PendulumParams, q0: f64, p0: f64, steps: usize) -> Result<Trajectory> {
    params.validate()?;
    integrate(|q, p| Ok(pendulum_field(params, q, p)), q0, p0, steps, params.step)
}

/// Integrates a vector field on the cylinder whose frame coefficients are
/// `(dq/dt, dp/dt)`; one fixed field for the whole rollout. Fields on flat
/// ℝ² (the baseline model's phase space) are accepted too.
pub fn gp_rollout<F: VectorField + ?Sized>(field: &F, q0: f64, p0: f64, steps: usize, h: f64) -> Result<Trajectory> {
    let m = field.manifold();
    if m.intrinsic_dim() != 2 {
        return Err(GvfError::shape("field on a 2-dimensional phase space", m.intrinsic_dim()));
    }
    if *m != Manifold::cylinder() && *m != Manifold::Euclidean(2) {
        return Err(GvfError::Domain(format!("rollouts need a field on the cylinder, got {}", m.name())));
    }
    if !(h > 0.0) {
        return Err(GvfError::Config(format!("step size must be positive, got {h}")));
    }
    integrate(
        |q, p| {
            if !q.is_finite() || !p.is_finite() {
                return Err(GvfError::Divergence { step: 0 });
            }
            let v = field.eval(&[q, p])?;
            Ok((v[0], v[1]))
        },
        q0,
        p0,
        steps,
        h,
    )
}

/// Relative secular energy change: the mean of `H` over the last `window`
/// states against the mean over the first `window`, divided by `H(x₀)`.
/// Leapfrog energy error oscillates with amplitude `O(h²)`; averaging over a
/// window longer than the period separates that from drift.
pub fn energy_drift(params: &PendulumParams, trajectory: &Trajectory, window: usize) -> Result<f64> {
    let n = trajectory.len();
    if window == 0 || 2 * window > n {
        return Err(GvfError::shape(format!("window of at most {} states", n / 2), window));
    }
    let mean = |states: &[(f64, f64)]| {
        states.iter().map(|&(q, p)| hamiltonian(params, q, p)).sum::<f64>() / states.len() as f64
    };
    let (q0, p0) = trajectory.states[0];
    let h0 = hamiltonian(params, q0, p0);
    if h0 == 0.0 {
        return Err(GvfError::Domain("energy drift is relative to a nonzero initial energy".into()));
    }
    Ok((mean(&trajectory.states[n - window..]) - mean(&trajectory.states[..window])).abs() / h0.abs())
}

/// Backward-Euler momenta `p_i = m l² (q_{i+1} − q_i) / h` from observed
/// angles, with differences unwrapped into (−π, π].
pub fn estimate_momenta(positions: &[f64], params: &PendulumParams) -> Result<Vec<f64>> {
    if positions.len() < 2 {
        return Err(GvfError::shape("at least 2 positions", positions.len()));
    }
    let scale = params.inertia() / params.step;
    Ok(positions
        .windows(2)
        .map(|w| scale * wrapped_difference(w[0], w[1]))
        .collect())
}

/// Forward differences `((q_{i+1} − q_i)/h, (p_{i+1} − p_i)/h)` attached to
/// state `i`; in the cylinder frame these are the tangent coefficients.
pub fn dynamics_observations(trajectory: &Trajectory, h: f64) -> Result<Vec<(Vec<f64>, DVector<f64>)>> {
    if trajectory.len() < 2 {
        return Err(GvfError::shape("trajectory of length at least 2", trajectory.len()));
    }
    Ok(trajectory
        .states
        .windows(2)
        .map(|w| {
            let (q0, p0) = w[0];
            let (q1, p1) = w[1];
            let v = DVector::from_vec(vec![wrapped_difference(q0, q1) / h, (p1 - p0) / h]);
            (vec![q0, p0], v)
        })
        .collect())
}

/// Settings of the pendulum learning experiment.
#[derive(Clone, Debug, Serialize)]
pub struct PendulumSetup {
    pub params: PendulumParams,
    pub starts: Vec<(f64, f64)>,
    pub steps: usize,
    /// Lengthscales of the circle and momentum factors.
    pub lengthscales: (f64, f64),
    pub amplitude: f64,
    pub noise_variance: f64,
    /// Truncation of the circle factor.
    pub truncation: usize,
}

impl Default for PendulumSetup {
    fn default() -> Self {
        PendulumSetup {
            params: PendulumParams::default(),
            starts: vec![(2.0, 0.0), (-1.0, 1.0)],
            steps: 200,
            lengthscales: (0.3, 1.2),
            amplitude: 1.0,
            noise_variance: 2.5e-3,
            truncation: 101,
        }
    }
}

impl PendulumSetup {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.steps < 3 {
            return Err(GvfError::Config(format!("rollouts need at least 3 steps, got {}", self.steps)));
        }
        if self.starts.is_empty() {
            return Err(GvfError::Config("need at least one start state".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(GvfError::Config("noise variance must be positive".into()));
        }
        Ok(())
    }

    /// Projected SE kernel on the cylinder.
    pub fn manifold_kernel(&self) -> Result<ProjectedKernel<AnyScalarKernel>> {
        let (lq, lp) = self.lengthscales;
        Ok(ProjectedKernel::new(AnyScalarKernel::build(
            &Manifold::cylinder(),
            KernelFamily::SquaredExponential,
            &[lq, lp],
            self.amplitude,
            Some(self.truncation),
        )?))
    }

    /// ARD SE kernel on ℝ² treating the raw angle in `[0, 2π)` as a coordinate.
    pub fn euclidean_kernel(&self) -> Result<ProjectedKernel<AnyScalarKernel>> {
        let (lq, lp) = self.lengthscales;
        Ok(ProjectedKernel::new(AnyScalarKernel::build(
            &Manifold::Euclidean(2),
            KernelFamily::SquaredExponential,
            &[lq, lp],
            self.amplitude,
            None,
        )?))
    }
}

/// Ground-truth rollouts and the training set built from their angles only:
/// momenta by backward Euler, then forward-difference field observations.
pub fn pendulum_dataset(setup: &PendulumSetup) -> Result<(Vec<Trajectory>, VectorObservationSet)> {
    setup.validate()?;
    let h = setup.params.step;
    let mut rollouts = Vec::with_capacity(setup.starts.len());
    let mut points = Vec::new();
    let mut values = Vec::new();
    for &(q0, p0) in &setup.starts {
        let truth = leapfrog_rollout(&setup.params, q0, p0, setup.steps)?;
        let positions = truth.positions();
        let momenta = estimate_momenta(&positions, &setup.params)?;
        let estimated = Trajectory {
            times: truth.times[..momenta.len()].to_vec(),
            states: positions.iter().copied().zip(momenta).collect(),
        };
        for (x, v) in dynamics_observations(&estimated, h)? {
            points.push(x);
            values.push(v);
        }
        rollouts.push(truth);
    }
    let obs = VectorObservationSet::new(points, values, setup.noise_variance)?;
    Ok((rollouts, obs))
}

/// The sparse state that makes the variational posterior exact: inducing
/// points at the data, `μ = y`, `Σ = σ² I`.
pub fn exact_sparse_state(manifold: &Manifold, observations: &VectorObservationSet) -> Result<SvgpState> {
    let d = observations.dim();
    let cov = nalgebra::DMatrix::identity(d, d) * observations.noise_variance();
    SvgpState::new(
        manifold,
        observations.points().to_vec(),
        observations.stacked_values(),
        &vec![cov; observations.len()],
        observations.noise_variance(),
    )
}

/// Largest `‖m(2π − δ, p) − m(δ, p)‖` over the given momenta.
pub fn seam_difference<F: VectorField + ?Sized>(field: &F, delta: f64, momenta: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &p in momenta {
        let a = field.eval(&[TAU - delta, p])?;
        let b = field.eval(&[delta, p])?;
        worst = worst.max((a - b).norm());
    }
    Ok(worst)
}

/// Momentum grid used for seam comparisons.
pub fn seam_momenta() -> Vec<f64> {
    (0..=24).map(|i| -6.0 + 0.5 * i as f64).collect()
}

/// Seam comparison between the cylinder model and the flat baseline.
#[derive(Clone, Debug, Serialize)]
pub struct SeamReport {
    pub manifold: f64,
    pub euclidean: f64,
    /// The same comparison for the true field.
    pub truth: f64,
}

pub fn pendulum_seam_report(setup: &PendulumSetup, delta: f64) -> Result<SeamReport> {
    let (_, obs) = pendulum_dataset(setup)?;
    let momenta = seam_momenta();
    let mk = setup.manifold_kernel()?;
    let ek = setup.euclidean_kernel()?;
    let manifold_state = exact_sparse_state(&Manifold::cylinder(), &obs)?;
    let euclid_state = exact_sparse_state(&Manifold::Euclidean(2), &obs)?;
    let manifold = seam_difference(&svgp_mean_field(&manifold_state, &mk)?, delta, &momenta)?;
    let euclidean = seam_difference(&svgp_mean_field(&euclid_state, &ek)?, delta, &momenta)?;
    let params = setup.params;
    let truth_field = crate::projected::FnField::new(Manifold::cylinder(), move |x: &[f64]| {
        let (a, b) = pendulum_field(&params, x[0], x[1]);
        DVector::from_vec(vec![a, b])
    });
    let truth = seam_difference(&truth_field, delta, &momenta)?;
    Ok(SeamReport {
        manifold,
        euclidean,
        truth,
    })
}

/// Adds i.i.d. Gaussian noise of the given variance to every observation.
pub fn perturb(observations: &VectorObservationSet, seed_value: u64) -> Result<VectorObservationSet> {
    let mut rng = seed::rng_for(seed_value, "observation-noise");
    let sd = observations.noise_variance().sqrt();
    let values = observations
        .values()
        .iter()
        .map(|v| v.map(|c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            c + sd * z
        }))
        .collect();
    VectorObservationSet::new(observations.points().to_vec(), values, observations.noise_variance())
}

/// Frame check used by rollouts: the cylinder frame is orthonormal with the
/// first vector along ∂/∂q, so frame coefficients are `(dq/dt, dp/dt)`.
pub fn cylinder_frame_is_chart_aligned<K: MatrixKernel>(kernel: &K, q: f64, p: f64) -> Result<bool> {
    let frame = kernel.frame(&[q, p])?;
    let expected = Manifold::cylinder().projection_matrix(&[q, p])?;
    Ok((frame - expected).amax() == 0.0)
}

/// Rollouts of independent pathwise posterior samples of a sparse model, one
/// fixed field per rollout. Sample `i` uses `seed::derive_index(seed, i)`.
pub fn posterior_rollouts(
    state: &SvgpState,
    kernel: &ProjectedKernel<AnyScalarKernel>,
    feature_budget: usize,
    start: (f64, f64),
    steps: usize,
    h: f64,
    count: usize,
    seed_value: u64,
) -> Result<Vec<Trajectory>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = seed::derive_index(seed_value, i);
            let prior = crate::projected::sample_prior_field(kernel, feature_budget, seed::derive(s, "prior"))?;
            let field = crate::inference::svgp_pathwise_sample(state, kernel, prior, seed::derive(s, "update"))?;
            gp_rollout(&field, start.0, start.1, steps, h)
        })
        .collect()
}
