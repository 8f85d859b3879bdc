//! Exact, pathwise and sparse variational conditioning of Gaussian vector fields.
//!
//! All matrices are assembled from `d × d` frame blocks. Vectors of tangent
//! coefficients are stacked point-major: entry `i·d + c` is channel `c` of
//! point `i`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GvfError, Result};
use crate::linalg::{block_diagonal, jittered_cholesky, log_det, psd_factor, stack, unstack};
use crate::manifold::{GaugeField, Manifold};
use crate::projected::{MatrixKernel, ProjectedKernel, VectorField};
use crate::seed;
use crate::spectral::ScalarKernel;

/// Largest `n·d` accepted by the dense exact posterior.
pub const MAX_EXACT_SIZE: usize = 5000;

/// Training data: chart points with tangent coefficient vectors in the
/// kernel's frame, observed with i.i.d. Gaussian noise per channel.
#[derive(Clone, Debug)]
pub struct VectorObservationSet {
    points: Vec<Vec<f64>>,
    values: Vec<DVector<f64>>,
    noise_variance: f64,
}

impl VectorObservationSet {
    pub fn new(points: Vec<Vec<f64>>, values: Vec<DVector<f64>>, noise_variance: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(GvfError::Domain("need at least one observation".into()));
        }
        if points.len() != values.len() {
            return Err(GvfError::shape(
                format!("{} values", points.len()),
                values.len(),
            ));
        }
        let d = values[0].len();
        if d == 0 || values.iter().any(|v| v.len() != d) {
            return Err(GvfError::shape(format!("values of length {d}"), "ragged values"));
        }
        if values.iter().flat_map(|v| v.iter()).any(|v| !v.is_finite()) {
            return Err(GvfError::Domain("observation values must be finite".into()));
        }
        if !(noise_variance > 0.0) || !noise_variance.is_finite() {
            return Err(GvfError::Domain(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        Ok(VectorObservationSet {
            points,
            values,
            noise_variance,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn stacked_values(&self) -> DVector<f64> {
        stack(&self.values)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.points[i].clone()).collect(),
            indices.iter().map(|&i| self.values[i].clone()).collect(),
            self.noise_variance,
        )
    }

    /// The same data written in the frame `A F`: `y_i ↦ A(x_i) y_i`.
    pub fn gauge_transformed(&self, gauge: &GaugeField) -> Result<Self> {
        let values = self
            .points
            .iter()
            .zip(&self.values)
            .map(|(x, y)| Ok(gauge.at(x)? * y))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.points.clone(), values, self.noise_variance)
    }
}

fn check_kernel_data<K: MatrixKernel>(kernel: &K, obs: &VectorObservationSet) -> Result<()> {
    if obs.dim() != kernel.dim() {
        return Err(GvfError::shape(
            format!("{}-dimensional tangent values", kernel.dim()),
            obs.dim(),
        ));
    }
    Ok(())
}

/// Block-diagonal `σ² I` added to a Gram matrix.
fn add_noise(mut gram: DMatrix<f64>, noise: f64) -> DMatrix<f64> {
    for i in 0..gram.nrows() {
        gram[(i, i)] += noise;
    }
    gram
}

/// Dense GP posterior given vector observations and a zero prior mean.
#[derive(Clone, Debug)]
pub struct ExactPosterior<K> {
    kernel: K,
    observations: VectorObservationSet,
    factor: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

pub fn exact_posterior_fit<K: MatrixKernel>(kernel: K, observations: VectorObservationSet) -> Result<ExactPosterior<K>> {
    check_kernel_data(&kernel, &observations)?;
    let nd = observations.len() * observations.dim();
    if nd > MAX_EXACT_SIZE {
        return Err(GvfError::Domain(format!(
            "exact posterior limited to n·d ≤ {MAX_EXACT_SIZE}, got {nd}; use the sparse model"
        )));
    }
    let gram = add_noise(kernel.gram(observations.points())?, observations.noise_variance());
    let (factor, jitter) = jittered_cholesky(&gram)?;
    let alpha = factor.solve(&observations.stacked_values());
    Ok(ExactPosterior {
        kernel,
        observations,
        factor,
        alpha,
        jitter,
    })
}

impl<K: MatrixKernel> ExactPosterior<K> {
    pub fn kernel(&self) -> &K {
        &self.kernel
    }

    pub fn observations(&self) -> &VectorObservationSet {
        &self.observations
    }

    /// Diagonal jitter that had to be added on top of the noise.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `(K_xx + σ²I)⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    pub fn mean(&self, x: &[f64]) -> Result<DVector<f64>> {
        let kx = self.kernel.cross_gram(&[x.to_vec()], self.observations.points())?;
        Ok(kx * &self.alpha)
    }

    /// Mean and `d × d` covariance block at each test point.
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
        let out = xs
            .par_iter()
            .map(|x| {
                let kx = self.kernel.cross_gram(std::slice::from_ref(x), self.observations.points())?;
                let mean = &kx * &self.alpha;
                let cov = self.kernel.eval(x, x)? - &kx * self.factor.solve(&kx.transpose());
                Ok((mean, symmetrize(cov)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(out.into_iter().unzip())
    }

    /// Joint posterior covariance of all test points (stacked, nd × nd).
    pub fn joint_covariance(&self, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let kx = self.kernel.cross_gram(xs, self.observations.points())?;
        let prior = self.kernel.gram(xs)?;
        Ok(symmetrize(prior - &kx * self.factor.solve(&kx.transpose())))
    }

    /// `log N(y | 0, K_xx + σ²I)`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let y = self.observations.stacked_values();
        let n = y.len() as f64;
        -0.5 * y.dot(&self.alpha) - 0.5 * log_det(&self.factor) - 0.5 * n * (2.0 * PI).ln()
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Maximizes the log marginal likelihood over a common multiplier of all
/// lengthscales (golden-section search on its logarithm within
/// `[lo, hi] × current`). Returns the refitted posterior.
pub fn optimize_lengthscale<S: ScalarKernel + Clone>(
    kernel: &ProjectedKernel<S>,
    observations: &VectorObservationSet,
    lo: f64,
    hi: f64,
    iterations: usize,
) -> Result<ExactPosterior<ProjectedKernel<S>>> {
    let base = kernel.scalar().lengthscales();
    let fit_at = |log_m: f64| -> Result<ExactPosterior<ProjectedKernel<S>>> {
        let ls: Vec<f64> = base.iter().map(|l| l * log_m.exp()).collect();
        let k = kernel.with_scalar(kernel.scalar().with_lengthscales(&ls)?);
        exact_posterior_fit(k, observations.clone())
    };
    let score = |log_m: f64| fit_at(log_m).map(|p| p.log_marginal_likelihood());
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - golden * (b - a);
    let mut d = a + golden * (b - a);
    let (mut fc, mut fd) = (score(c)?, score(d)?);
    for _ in 0..iterations {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - golden * (b - a);
            fc = score(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + golden * (b - a);
            fd = score(d)?;
        }
    }
    fit_at(if fc > fd { c } else { d })
}

/// A posterior sample `x ↦ f(x) + K_xX v` with `v` fixed at construction.
#[derive(Clone, Debug)]
pub struct PathwiseSample<K, F> {
    kernel: K,
    prior: F,
    anchors: Vec<Vec<f64>>,
    weights: DVector<f64>,
}

impl<K: MatrixKernel, F: VectorField> PathwiseSample<K, F> {
    pub fn prior(&self) -> &F {
        &self.prior
    }

    /// The update term `K_xX v` alone.
    pub fn update(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.kernel.cross_gram(&[x.to_vec()], &self.anchors)? * &self.weights)
    }
}

impl<K: MatrixKernel, F: VectorField> VectorField for PathwiseSample<K, F> {
    fn manifold(&self) -> &Manifold {
        self.kernel.manifold()
    }

    fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.prior.eval(x)? + self.update(x)?)
    }
}

fn prior_at<F: VectorField>(prior: &F, points: &[Vec<f64>]) -> Result<DVector<f64>> {
    Ok(stack(&points.iter().map(|x| prior.eval(x)).collect::<Result<Vec<_>>>()?))
}

/// Matheron's rule: `f + K_·X (K_XX + σ²I)⁻¹ (y − f(X) − ε)` with
/// `ε ~ N(0, σ²I)` drawn from `seed`.
pub fn pathwise_posterior_sample<K: MatrixKernel + Clone, F: VectorField>(
    posterior: &ExactPosterior<K>,
    prior: F,
    seed: u64,
) -> Result<PathwiseSample<K, F>> {
    let obs = posterior.observations();
    let mut rng = seed::rng_for(seed, "pathwise-noise");
    let sd = obs.noise_variance().sqrt();
    let eps = DVector::from_fn(obs.len() * obs.dim(), |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * sd
    });
    pathwise_posterior_sample_with_noise(posterior, prior, &eps)
}

/// [`pathwise_posterior_sample`] with an explicit noise vector.
pub fn pathwise_posterior_sample_with_noise<K: MatrixKernel + Clone, F: VectorField>(
    posterior: &ExactPosterior<K>,
    prior: F,
    eps: &DVector<f64>,
) -> Result<PathwiseSample<K, F>> {
    let obs = posterior.observations();
    let residual = obs.stacked_values() - prior_at(&prior, obs.points())? - eps;
    Ok(PathwiseSample {
        kernel: posterior.kernel().clone(),
        anchors: obs.points().to_vec(),
        weights: posterior.solve(&residual),
        prior,
    })
}

/// Sparse variational state: inducing chart points `z`, mean `μ` (stacked
/// frame coefficients) and block-diagonal `Σ` stored as lower-triangular
/// factors. The approximate posterior has mean `K_·z (K_zz + Σ)⁻¹ μ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvgpState {
    pub manifold: String,
    pub dim: usize,
    pub inducing: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Row-major `d × d` lower-triangular factors, one per inducing point.
    pub scale_factors: Vec<Vec<f64>>,
    pub lengthscales: Vec<f64>,
    pub amplitude: f64,
    pub noise_variance: f64,
    pub seed: u64,
}

impl SvgpState {
    /// Builds a state from covariance blocks (factored here).
    pub fn new(
        manifold: &Manifold,
        inducing: Vec<Vec<f64>>,
        mean: DVector<f64>,
        covariances: &[DMatrix<f64>],
        noise_variance: f64,
    ) -> Result<Self> {
        let factors = covariances.iter().map(psd_factor).collect::<Result<Vec<_>>>()?;
        Self::from_factors(manifold, inducing, mean, &factors, noise_variance)
    }

    pub fn from_factors(
        manifold: &Manifold,
        inducing: Vec<Vec<f64>>,
        mean: DVector<f64>,
        factors: &[DMatrix<f64>],
        noise_variance: f64,
    ) -> Result<Self> {
        let d = manifold.intrinsic_dim();
        let m = inducing.len();
        if m == 0 {
            return Err(GvfError::State("need at least one inducing point".into()));
        }
        if mean.len() != m * d || factors.len() != m {
            return Err(GvfError::shape(
                format!("{} mean entries and {m} factors", m * d),
                format!("{} and {}", mean.len(), factors.len()),
            ));
        }
        let mut scale_factors = Vec::with_capacity(m);
        for f in factors {
            if f.shape() != (d, d) {
                return Err(GvfError::shape(format!("{d}x{d} factor"), format!("{}x{}", f.nrows(), f.ncols())));
            }
            scale_factors.push((0..d * d).map(|k| if k % d <= k / d { f[(k / d, k % d)] } else { 0.0 }).collect());
        }
        let state = SvgpState {
            manifold: manifold.name(),
            dim: d,
            inducing,
            mean: mean.iter().copied().collect(),
            scale_factors,
            lengthscales: Vec::new(),
            amplitude: 1.0,
            noise_variance,
            seed: 0,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn with_hyperparameters(mut self, lengthscales: Vec<f64>, amplitude: f64, seed: u64) -> Self {
        self.lengthscales = lengthscales;
        self.amplitude = amplitude;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        let m = self.inducing.len();
        if m == 0 || self.mean.len() != m * d || self.scale_factors.len() != m {
            return Err(GvfError::State("inconsistent sizes".into()));
        }
        if self.scale_factors.iter().any(|f| f.len() != d * d) {
            return Err(GvfError::State("scale factor of wrong size".into()));
        }
        let all = self.mean.iter().chain(self.scale_factors.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(GvfError::State("non-finite variational parameter".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(GvfError::State("noise variance must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inducing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inducing.is_empty()
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn factor(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.scale_factors[k])
    }

    pub fn covariance_blocks(&self) -> Vec<DMatrix<f64>> {
        (0..self.len())
            .map(|k| {
                let l = self.factor(k);
                &l * l.transpose()
            })
            .collect()
    }

    /// The same state in the frame `A F`: `μ_k ↦ A(z_k) μ_k`, `Σ_k ↦ A Σ_k Aᵀ`.
    pub fn gauge_transformed(&self, gauge: &GaugeField) -> Result<Self> {
        let d = self.dim;
        let mu = unstack(&self.mean_vector(), d);
        let mut means = Vec::with_capacity(self.len());
        let mut covs = Vec::with_capacity(self.len());
        for (k, z) in self.inducing.iter().enumerate() {
            let a = gauge.at(z)?;
            means.push(&a * &mu[k]);
            let l = &a * self.factor(k);
            covs.push(&l * l.transpose());
        }
        let manifold = Manifold::from_name(&self.manifold)?;
        let mut out = SvgpState::new(&manifold, self.inducing.clone(), stack(&means), &covs, self.noise_variance)?;
        out.lengthscales = self.lengthscales.clone();
        out.amplitude = self.amplitude;
        out.seed = self.seed;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| GvfError::State(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: SvgpState = serde_json::from_str(text).map_err(|e| GvfError::Format {
            row: e.line(),
            message: e.to_string(),
        })?;
        state.validate()?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| GvfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GvfError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Solves against `B = K_zz + Σ` shared by prediction, the ELBO and sampling.
struct InducingSystem {
    kzz: DMatrix<f64>,
    sigma: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    /// `B⁻¹ μ`.
    a: DVector<f64>,
}

impl InducingSystem {
    fn new<K: MatrixKernel>(state: &SvgpState, kernel: &K) -> Result<Self> {
        if state.dim != kernel.dim() {
            return Err(GvfError::shape(format!("{}-dimensional state", kernel.dim()), state.dim));
        }
        state.validate()?;
        let kzz = kernel.gram(&state.inducing)?;
        let sigma = block_diagonal(&state.covariance_blocks());
        let (factor, _) = jittered_cholesky(&(&kzz + &sigma))?;
        let a = factor.solve(&state.mean_vector());
        Ok(InducingSystem { kzz, sigma, factor, a })
    }
}

/// Approximate posterior mean and `d × d` covariance blocks
/// `K_xx − K_xz B⁻¹ K_zx`.
pub fn svgp_predict<K: MatrixKernel>(
    state: &SvgpState,
    kernel: &K,
    test_points: &[Vec<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let sys = InducingSystem::new(state, kernel)?;
    let out = test_points
        .par_iter()
        .map(|x| {
            let kxz = kernel.cross_gram(std::slice::from_ref(x), &state.inducing)?;
            let mean = &kxz * &sys.a;
            let cov = kernel.eval(x, x)? - &kxz * sys.factor.solve(&kxz.transpose());
            Ok((mean, symmetrize(cov)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().unzip())
}

/// ELBO value and analytic gradients with respect to `μ` and the lower
/// triangles of the scale factors (row-major, matching [`SvgpState`]).
#[derive(Clone, Debug)]
pub struct ElboGradient {
    pub elbo: f64,
    pub expected_log_likelihood: f64,
    pub kl: f64,
    pub mean: DVector<f64>,
    pub factors: Vec<DMatrix<f64>>,
}

fn check_batch(obs: &VectorObservationSet, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(GvfError::Domain("minibatch must be nonempty".into()));
    }
    if let Some(i) = batch.iter().find(|&&i| i >= obs.len()) {
        return Err(GvfError::Domain(format!("minibatch index {i} out of range")));
    }
    Ok(())
}

/// Evidence lower bound `(n/|B|) Σ_{i∈B} E_q log N(y_i | f(x_i), σ²I) − KL(q(u) ‖ p(u))`.
pub fn svgp_elbo<K: MatrixKernel>(
    state: &SvgpState,
    kernel: &K,
    observations: &VectorObservationSet,
    minibatch: &[usize],
) -> Result<f64> {
    Ok(elbo_terms(state, kernel, observations, minibatch, false)?.elbo)
}

pub fn svgp_elbo_gradient<K: MatrixKernel>(
    state: &SvgpState,
    kernel: &K,
    observations: &VectorObservationSet,
    minibatch: &[usize],
) -> Result<ElboGradient> {
    elbo_terms(state, kernel, observations, minibatch, true)
}

/// Full-data batch `0..n`.
pub fn full_batch(observations: &VectorObservationSet) -> Vec<usize> {
    (0..observations.len()).collect()
}

fn elbo_terms<K: MatrixKernel>(
    state: &SvgpState,
    kernel: &K,
    obs: &VectorObservationSet,
    batch: &[usize],
    with_gradient: bool,
) -> Result<ElboGradient> {
    check_kernel_data(kernel, obs)?;
    check_batch(obs, batch)?;
    let sys = InducingSystem::new(state, kernel)?;
    let d = state.dim;
    let m = state.len();
    let md = m * d;
    let s2 = obs.noise_variance();
    let scale = obs.len() as f64 / batch.len() as f64;

    let xb: Vec<Vec<f64>> = batch.iter().map(|&i| obs.points()[i].clone()).collect();
    let yb = stack(&batch.iter().map(|&i| obs.values()[i].clone()).collect::<Vec<_>>());
    let kxz = kernel.cross_gram(&xb, &state.inducing)?;
    // C = B⁻¹ K_zx, so the predictive mean is Cᵀ μ and M = Cᵀ.
    let c = sys.factor.solve(&kxz.transpose());
    let mean = c.transpose() * &state.mean_vector();
    let r = &yb - &mean;
    let trace_prior: f64 = xb
        .iter()
        .map(|x| kernel.eval(x, x).map(|k| k.trace()))
        .sum::<Result<f64>>()?;
    let trace_explained: f64 = kxz.component_mul(&c.transpose()).sum();
    let nb = (batch.len() * d) as f64;
    let ell = scale
        * (-0.5 * nb * (2.0 * PI * s2).ln() - (r.norm_squared() + trace_prior - trace_explained) / (2.0 * s2));

    // KL(N(K_zz B⁻¹ μ, K_zz B⁻¹ Σ) ‖ N(0, K_zz)).
    let blocks = state.covariance_blocks();
    let mut log_det_sigma = 0.0;
    let mut sigma_inv = Vec::with_capacity(m);
    for (k, b) in blocks.iter().enumerate() {
        let ch = b.clone().cholesky().ok_or_else(|| {
            GvfError::State(format!("covariance block {k} must be positive definite for the ELBO"))
        })?;
        log_det_sigma += log_det(&ch);
        sigma_inv.push(ch.inverse());
    }
    let b_inv = sys.factor.inverse();
    let kb = &sys.kzz * &sys.a;
    let b_vec = sys.factor.solve(&kb);
    let trace_term = (&b_inv * &sys.sigma).trace();
    let kl = 0.5 * (trace_term + sys.a.dot(&kb) - md as f64 - log_det_sigma + log_det(&sys.factor));
    let elbo = ell - kl;
    if !elbo.is_finite() {
        return Err(GvfError::State("ELBO is not finite".into()));
    }
    if !with_gradient {
        return Ok(ElboGradient {
            elbo,
            expected_log_likelihood: ell,
            kl,
            mean: DVector::zeros(0),
            factors: Vec::new(),
        });
    }

    let grad_mean = (&c * &r) * (scale / s2) - &b_vec;
    let u = &c * &r;
    let mut g_sigma = (&c * c.transpose()) * (-0.5 * scale / s2) - (&u * sys.a.transpose()) * (scale / s2);
    let b_inv_kzz_b_inv = &b_inv * &sys.kzz * &b_inv;
    let kl_grad = (&b_inv + b_inv_kzz_b_inv - &sys.a * b_vec.transpose() - &b_vec * sys.a.transpose()) * 0.5;
    g_sigma -= kl_grad;
    let mut factors = Vec::with_capacity(m);
    for k in 0..m {
        let mut g = g_sigma.view((k * d, k * d), (d, d)).into_owned();
        for i in 0..d {
            for j in 0..d {
                g[(i, j)] += 0.5 * sigma_inv[k][(i, j)];
            }
        }
        let gl = (&g + g.transpose()) * state.factor(k);
        factors.push(gl.lower_triangle());
    }
    Ok(ElboGradient {
        elbo,
        expected_log_likelihood: ell,
        kl,
        mean: grad_mean,
        factors,
    })
}

/// Greedy farthest-point selection of `m` training points by geodesic
/// distance, starting from the first point.
pub fn select_inducing(manifold: &Manifold, points: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > points.len() {
        return Err(GvfError::Domain(format!(
            "need 1 ≤ m ≤ {} inducing points, got {m}",
            points.len()
        )));
    }
    let mut chosen = vec![0];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| manifold.geodesic_distance(&points[0], p))
        .collect::<Result<_>>()?;
    while chosen.len() < m {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(manifold.geodesic_distance(&points[next], p)?);
        }
    }
    Ok(chosen)
}

#[derive(Clone, Debug)]
pub struct SvgpConfig {
    pub inducing_count: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Minibatch size; `None` uses all data every step.
    pub batch_size: Option<usize>,
    /// Also optimize a common multiplier of the kernel lengthscales.
    pub learn_lengthscale: bool,
    pub seed: u64,
}

impl Default for SvgpConfig {
    fn default() -> Self {
        SvgpConfig {
            inducing_count: 32,
            steps: 500,
            learning_rate: 1e-2,
            batch_size: None,
            learn_lengthscale: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SvgpFit<S> {
    pub state: SvgpState,
    pub kernel: ProjectedKernel<S>,
    pub initial_elbo: f64,
    pub best_elbo: f64,
    /// Full-data ELBO after each step.
    pub trace: Vec<f64>,
}

/// `z` at selected training points, `μ = y(z)`, `Σ_k = σ² I`.
pub fn svgp_initial_state<S: ScalarKernel>(
    kernel: &ProjectedKernel<S>,
    observations: &VectorObservationSet,
    inducing_count: usize,
    seed: u64,
) -> Result<SvgpState> {
    check_kernel_data(kernel, observations)?;
    let idx = select_inducing(kernel.manifold(), observations.points(), inducing_count)?;
    let d = observations.dim();
    let z = idx.iter().map(|&i| observations.points()[i].clone()).collect();
    let mu = stack(&idx.iter().map(|&i| observations.values()[i].clone()).collect::<Vec<_>>());
    let cov = DMatrix::identity(d, d) * observations.noise_variance();
    Ok(SvgpState::new(kernel.manifold(), z, mu, &vec![cov; idx.len()], observations.noise_variance())?
        .with_hyperparameters(kernel.scalar().lengthscales(), kernel.scalar().variance(), seed))
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step on `params` along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Flattened optimizer parameters: μ, the lower triangles of every factor,
/// then optionally the log lengthscale multiplier.
fn pack(state: &SvgpState, log_mult: Option<f64>) -> Vec<f64> {
    let d = state.dim;
    let mut out = state.mean.clone();
    for f in &state.scale_factors {
        for i in 0..d {
            out.extend_from_slice(&f[i * d..i * d + i + 1]);
        }
    }
    out.extend(log_mult);
    out
}

fn unpack(params: &[f64], template: &SvgpState) -> SvgpState {
    let d = template.dim;
    let md = template.mean.len();
    let mut s = template.clone();
    s.mean.copy_from_slice(&params[..md]);
    let mut o = md;
    for f in &mut s.scale_factors {
        for i in 0..d {
            f[i * d..i * d + i + 1].copy_from_slice(&params[o..o + i + 1]);
            o += i + 1;
        }
    }
    s
}

fn pack_gradient(g: &ElboGradient, d: usize) -> Vec<f64> {
    let mut out: Vec<f64> = g.mean.iter().copied().collect();
    for f in &g.factors {
        for i in 0..d {
            for j in 0..=i {
                out.push(f[(i, j)]);
            }
        }
    }
    out
}

/// Maximizes the ELBO with Adam from [`svgp_initial_state`], returning the
/// best state seen (by full-data ELBO).
pub fn svgp_fit<S: ScalarKernel + Clone>(
    kernel: &ProjectedKernel<S>,
    observations: &VectorObservationSet,
    config: &SvgpConfig,
) -> Result<SvgpFit<S>> {
    if !(config.learning_rate > 0.0) {
        return Err(GvfError::Config("learning rate must be positive".into()));
    }
    let init = svgp_initial_state(kernel, observations, config.inducing_count, config.seed)?;
    let full = full_batch(observations);
    let initial_elbo = svgp_elbo(&init, kernel, observations, &full)?;
    let base_ls = kernel.scalar().lengthscales();
    let kernel_at = |log_mult: f64| -> Result<ProjectedKernel<S>> {
        let ls: Vec<f64> = base_ls.iter().map(|l| l * log_mult.exp()).collect();
        Ok(kernel.with_scalar(kernel.scalar().with_lengthscales(&ls)?))
    };

    let learn = config.learn_lengthscale;
    let mut params = pack(&init, learn.then_some(0.0));
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut rng = seed::rng_for(config.seed, "minibatch");
    let mut best = (initial_elbo, init.clone(), kernel.clone());
    let mut trace = Vec::with_capacity(config.steps);
    let mut current_kernel = kernel.clone();
    for step in 0..config.steps {
        let state = unpack(&params, &init);
        let batch = match config.batch_size {
            Some(b) if b < observations.len() => {
                let mut idx = index::sample(&mut rng, observations.len(), b).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => full.clone(),
        };
        let g = svgp_elbo_gradient(&state, &current_kernel, observations, &batch).map_err(|e| {
            GvfError::Optimization {
                step,
                reason: e.to_string(),
            }
        })?;
        let mut grad = pack_gradient(&g, state.dim);
        if learn {
            let lm = params[params.len() - 1];
            let h = 1e-4;
            let up = svgp_elbo(&state, &kernel_at(lm + h)?, observations, &batch);
            let down = svgp_elbo(&state, &kernel_at(lm - h)?, observations, &batch);
            let dl = match (up, down) {
                (Ok(u), Ok(d)) => (u - d) / (2.0 * h),
                _ => 0.0,
            };
            grad.push(dl);
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(GvfError::Optimization {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        adam.step(&mut params, &grad);
        if learn {
            current_kernel = kernel_at(params[params.len() - 1])?;
        }
        let next = unpack(&params, &init);
        let value = svgp_elbo(&next, &current_kernel, observations, &full).map_err(|e| {
            GvfError::Optimization {
                step,
                reason: e.to_string(),
            }
        })?;
        if !value.is_finite() {
            return Err(GvfError::Optimization {
                step,
                reason: "ELBO is not finite".into(),
            });
        }
        trace.push(value);
        if value > best.0 {
            best = (value, next, current_kernel.clone());
        }
    }
    let (best_elbo, state, kernel) = best;
    let state = state.with_hyperparameters(
        kernel.scalar().lengthscales(),
        kernel.scalar().variance(),
        config.seed,
    );
    Ok(SvgpFit {
        state,
        kernel,
        initial_elbo,
        best_elbo,
        trace,
    })
}

/// `x ↦ f(x) + K_xz (K_zz + Σ)⁻¹ (μ − f(z) − ε)` with `ε ~ N(0, Σ)`.
pub fn svgp_pathwise_sample<K: MatrixKernel + Clone, F: VectorField>(
    state: &SvgpState,
    kernel: &K,
    prior: F,
    seed: u64,
) -> Result<PathwiseSample<K, F>> {
    let d = state.dim;
    let mut rng = seed::rng_for(seed, "svgp-noise");
    let mut eps = DVector::zeros(state.len() * d);
    for k in 0..state.len() {
        let xi = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        eps.rows_mut(k * d, d).copy_from(&(state.factor(k) * xi));
    }
    svgp_pathwise_sample_with_noise(state, kernel, prior, &eps)
}

pub fn svgp_pathwise_sample_with_noise<K: MatrixKernel + Clone, F: VectorField>(
    state: &SvgpState,
    kernel: &K,
    prior: F,
    eps: &DVector<f64>,
) -> Result<PathwiseSample<K, F>> {
    let sys = InducingSystem::new(state, kernel)?;
    let residual = state.mean_vector() - prior_at(&prior, &state.inducing)? - eps;
    Ok(PathwiseSample {
        kernel: kernel.clone(),
        anchors: state.inducing.clone(),
        weights: sys.factor.solve(&residual),
        prior,
    })
}

/// Posterior mean of an exact or sparse model as a [`VectorField`].
pub struct MeanField<'a, K> {
    kernel: &'a K,
    anchors: Vec<Vec<f64>>,
    weights: DVector<f64>,
}

impl<K: MatrixKernel> ExactPosterior<K> {
    pub fn mean_field(&self) -> MeanField<'_, K> {
        MeanField {
            kernel: &self.kernel,
            anchors: self.observations.points().to_vec(),
            weights: self.alpha.clone(),
        }
    }
}

pub fn svgp_mean_field<'a, K: MatrixKernel>(state: &SvgpState, kernel: &'a K) -> Result<MeanField<'a, K>> {
    let sys = InducingSystem::new(state, kernel)?;
    Ok(MeanField {
        kernel,
        anchors: state.inducing.clone(),
        weights: sys.a,
    })
}

impl<K: MatrixKernel> VectorField for MeanField<'_, K> {
    fn manifold(&self) -> &Manifold {
        self.kernel.manifold()
    }

    fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.kernel.cross_gram(&[x.to_vec()], &self.anchors)? * &self.weights)
    }
}
