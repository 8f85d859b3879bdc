//! Projected matrix-valued kernels and Gaussian vector field priors.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{GvfError, Result};
use crate::manifold::{GaugeField, Manifold};
use crate::seed;
use crate::spectral::{FeatureMap, ScalarFieldSample, ScalarKernel};

/// A cross-covariance kernel represented in a frame.
///
/// Every such kernel arises by projection, so implementors expose the frame's
/// projection matrix `P_x` (d × d') and an ambient matrix kernel `κ(x, x')`
/// (d' × d'); the frame representation is `P_x κ(x, x') P_{x'}ᵀ`.
pub trait MatrixKernel: Send + Sync {
    fn manifold(&self) -> &Manifold;

    /// Number of tangent coefficients per point.
    fn dim(&self) -> usize {
        self.manifold().intrinsic_dim()
    }

    /// Projection matrix of the kernel's frame at `x`.
    fn frame(&self, x: &[f64]) -> Result<DMatrix<f64>>;

    /// Ambient kernel `κ(x, y)`.
    fn ambient(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>>;

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        let px = self.frame(x)?;
        let py = self.frame(y)?;
        Ok(px * self.ambient(x, y)? * py.transpose())
    }

    /// Block matrix with `d × d` block `(i, j)` equal to `K(xs[i], ys[j])`.
    fn cross_gram(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let fx = xs.iter().map(|x| self.frame(x)).collect::<Result<Vec<_>>>()?;
        let fy = ys
            .iter()
            .map(|y| self.frame(y).map(|p| p.transpose()))
            .collect::<Result<Vec<_>>>()?;
        let mut out = DMatrix::zeros(d * xs.len(), d * ys.len());
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                let block = &fx[i] * self.ambient(x, y)? * &fy[j];
                out.view_mut((i * d, j * d), (d, d)).copy_from(&block);
            }
        }
        Ok(out)
    }

    fn gram(&self, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        self.cross_gram(xs, xs)
    }
}

impl<T: MatrixKernel + ?Sized> MatrixKernel for &T {
    fn manifold(&self) -> &Manifold {
        (**self).manifold()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn frame(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        (**self).frame(x)
    }
    fn ambient(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        (**self).ambient(x, y)
    }
    fn eval(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        (**self).eval(x, y)
    }
    fn cross_gram(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        (**self).cross_gram(xs, ys)
    }
}

/// `K_F(x, x') = P_x κ(x, x') P_{x'}ᵀ` with `κ = k · B`, a scalar manifold
/// kernel times a constant PSD mixing matrix (`B = I` by default, giving `d'`
/// independent ambient processes).
#[derive(Clone, Debug)]
pub struct ProjectedKernel<K> {
    scalar: K,
    mixing: Option<DMatrix<f64>>,
    mixing_factor: Option<DMatrix<f64>>,
}

impl<K: ScalarKernel> ProjectedKernel<K> {
    pub fn new(scalar: K) -> Self {
        ProjectedKernel {
            scalar,
            mixing: None,
            mixing_factor: None,
        }
    }

    /// Uses `κ = k · B` for a symmetric positive-definite `B` (d' × d').
    pub fn with_mixing(scalar: K, mixing: DMatrix<f64>) -> Result<Self> {
        let dd = scalar.manifold().ambient_dim();
        if mixing.shape() != (dd, dd) {
            return Err(GvfError::shape(
                format!("{dd}x{dd} mixing matrix"),
                format!("{}x{}", mixing.nrows(), mixing.ncols()),
            ));
        }
        if (&mixing - mixing.transpose()).amax() > 1e-12 * mixing.amax().max(1.0) {
            return Err(GvfError::Domain("mixing matrix must be symmetric".into()));
        }
        let factor = mixing
            .clone()
            .cholesky()
            .ok_or_else(|| GvfError::Domain("mixing matrix must be positive definite".into()))?
            .l();
        Ok(ProjectedKernel {
            scalar,
            mixing: Some(mixing),
            mixing_factor: Some(factor),
        })
    }

    pub fn scalar(&self) -> &K {
        &self.scalar
    }

    pub fn with_scalar<K2: ScalarKernel>(&self, scalar: K2) -> ProjectedKernel<K2> {
        ProjectedKernel {
            scalar,
            mixing: self.mixing.clone(),
            mixing_factor: self.mixing_factor.clone(),
        }
    }

    fn mixed_block(&self, px: &DMatrix<f64>, py_t: &DMatrix<f64>, k: f64) -> DMatrix<f64> {
        let dd = px.ncols();
        let kappa = match &self.mixing {
            None => DMatrix::identity(dd, dd) * k,
            Some(b) => b * k,
        };
        px * kappa * py_t
    }
}

impl<K: ScalarKernel> MatrixKernel for ProjectedKernel<K> {
    fn manifold(&self) -> &Manifold {
        self.scalar.manifold()
    }

    fn frame(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.manifold().projection_matrix(x)
    }

    fn ambient(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        let k = self.scalar.eval(x, y)?;
        let dd = self.manifold().ambient_dim();
        Ok(match &self.mixing {
            None => DMatrix::identity(dd, dd) * k,
            Some(b) => b * k,
        })
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        let px = self.frame(x)?;
        let py = self.frame(y)?;
        let k = self.scalar.eval(x, y)?;
        Ok(self.mixed_block(&px, &py.transpose(), k))
    }

    fn cross_gram(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let scalar = self.scalar.gram(xs, ys)?;
        let fx = xs.iter().map(|x| self.frame(x)).collect::<Result<Vec<_>>>()?;
        let fy = ys
            .iter()
            .map(|y| self.frame(y).map(|p| p.transpose()))
            .collect::<Result<Vec<_>>>()?;
        let mut out = DMatrix::zeros(d * xs.len(), d * ys.len());
        for i in 0..xs.len() {
            for j in 0..ys.len() {
                let block = self.mixed_block(&fx[i], &fy[j], scalar[(i, j)]);
                out.view_mut((i * d, j * d), (d, d)).copy_from(&block);
            }
        }
        Ok(out)
    }
}

/// The kernel represented in the frame `A F`: its projection matrices are
/// `A(x) P_x`, so `K_{AF}(x, x') = A(x) P_x κ(x, x') P_{x'}ᵀ A(x')ᵀ`.
#[derive(Clone, Debug)]
pub struct GaugedKernel<K> {
    inner: K,
    gauge: GaugeField,
}

pub fn gauge_transform_kernel<K: MatrixKernel>(kernel: K, gauge: GaugeField) -> Result<GaugedKernel<K>> {
    if gauge.dim() != kernel.dim() {
        return Err(GvfError::shape(
            format!("{0}x{0} gauge", kernel.dim()),
            format!("{0}x{0}", gauge.dim()),
        ));
    }
    Ok(GaugedKernel {
        inner: kernel,
        gauge,
    })
}

impl<K: MatrixKernel> GaugedKernel<K> {
    pub fn gauge(&self) -> &GaugeField {
        &self.gauge
    }

    pub fn inner(&self) -> &K {
        &self.inner
    }
}

impl<K: MatrixKernel> MatrixKernel for GaugedKernel<K> {
    fn manifold(&self) -> &Manifold {
        self.inner.manifold()
    }

    fn frame(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.gauge.at(x)? * self.inner.frame(x)?)
    }

    fn ambient(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.inner.ambient(x, y)
    }
}

/// Maximum of `‖K_{AF}(x, x') − A(x) K_F(x, x') A(x')ᵀ‖∞` over random point
/// pairs and random gauges (alternating point-keyed random rotations and
/// random matrices with condition number at most 10).
pub fn gauge_independence_report<K: MatrixKernel>(
    kernel: &K,
    n_points: usize,
    n_gauges: usize,
    seed: u64,
) -> Result<f64> {
    if n_gauges == 0 || n_points == 0 {
        log::warn!("gauge independence report with no trials; returning 0");
        return Ok(0.0);
    }
    let d = kernel.dim();
    let mut rng = seed::rng_for(seed, "gauge-report-points");
    let mut worst: f64 = 0.0;
    for g in 0..n_gauges {
        let gauge_seed = seed::derive_index(seed, g as u64);
        let gauge = if g % 2 == 0 {
            GaugeField::random_rotations(d, gauge_seed)
        } else {
            GaugeField::random_conditioned(d, 10.0, gauge_seed)
        };
        let transformed = gauge_transform_kernel(kernel, gauge.clone())?;
        for _ in 0..n_points {
            let x = kernel.manifold().sample_point(&mut rng);
            let y = kernel.manifold().sample_point(&mut rng);
            let lhs = transformed.eval(&x, &y)?;
            let rhs = gauge.at(&x)? * kernel.eval(&x, &y)? * gauge.at(&y)?.transpose();
            worst = worst.max((lhs - rhs).amax());
        }
    }
    Ok(worst)
}

/// Ambient vector represented by frame coefficients `v` at `x`:
/// `P_xᵀ (P_x P_xᵀ)⁻¹ v`, which is `P_xᵀ v` for orthonormal frames. Coefficients
/// produced by projection transform as `v ↦ A v` together with `P ↦ A P`, so
/// this pushforward is the same in every frame.
pub fn ambient_pushforward<K: MatrixKernel + ?Sized>(kernel: &K, x: &[f64], v: &DVector<f64>) -> Result<DVector<f64>> {
    let p = kernel.frame(x)?;
    let gram = &p * p.transpose();
    let solved = gram
        .cholesky()
        .ok_or_else(|| GvfError::Domain("degenerate frame".into()))?
        .solve(v);
    Ok(p.transpose() * solved)
}

/// Ambient covariance `Wᵀ S W` of frame-coefficient covariance `S` at `x`,
/// with `W = (P_x P_xᵀ)⁻¹ P_x`.
pub fn ambient_covariance<K: MatrixKernel + ?Sized>(kernel: &K, x: &[f64], s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = kernel.frame(x)?;
    let gram = &p * p.transpose();
    let w = gram
        .cholesky()
        .ok_or_else(|| GvfError::Domain("degenerate frame".into()))?
        .solve(&p);
    Ok(w.transpose() * s * w)
}

/// A vector field given by tangent coefficients in some frame.
pub trait VectorField: Send + Sync {
    fn manifold(&self) -> &Manifold;

    fn eval(&self, x: &[f64]) -> Result<DVector<f64>>;
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn manifold(&self) -> &Manifold {
        (**self).manifold()
    }
    fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        (**self).eval(x)
    }
}

impl<T: VectorField + ?Sized> VectorField for Box<T> {
    fn manifold(&self) -> &Manifold {
        (**self).manifold()
    }
    fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        (**self).eval(x)
    }
}

impl<T: VectorField + ?Sized> VectorField for Arc<T> {
    fn manifold(&self) -> &Manifold {
        (**self).manifold()
    }
    fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        (**self).eval(x)
    }
}

/// A vector field defined by a closure over chart points.
pub struct FnField<F> {
    manifold: Manifold,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64]) -> DVector<f64> + Send + Sync,
{
    pub fn new(manifold: Manifold, f: F) -> Self {
        FnField { manifold, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64]) -> DVector<f64> + Send + Sync,
{
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok((self.f)(x))
    }
}

/// One prior draw `x ↦ P_x f'(x)`, where `f'` stacks `d'` independent scalar
/// feature-map samples (mixed by the Cholesky factor of `B` when present).
#[derive(Clone, Debug)]
pub struct GaussianVectorFieldSample<K> {
    kernel: ProjectedKernel<K>,
    coordinates: Vec<ScalarFieldSample>,
    seed: u64,
}

pub fn sample_prior_field<K: ScalarKernel + Clone>(
    kernel: &ProjectedKernel<K>,
    feature_budget: usize,
    seed: u64,
) -> Result<GaussianVectorFieldSample<K>> {
    let map = Arc::new(kernel.scalar.feature_map(feature_budget, seed::derive(seed, "features"))?);
    let dd = kernel.manifold().ambient_dim();
    let coordinates = (0..dd)
        .map(|c| FeatureMap::sample(&map, seed::derive_index(seed, c as u64)))
        .collect();
    Ok(GaussianVectorFieldSample {
        kernel: kernel.clone(),
        coordinates,
        seed,
    })
}

impl<K: ScalarKernel> GaussianVectorFieldSample<K> {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The ambient function `f'(x)` (length d').
    pub fn ambient(&self, x: &[f64]) -> DVector<f64> {
        let raw = DVector::from_iterator(
            self.coordinates.len(),
            self.coordinates.iter().map(|c| c.eval(x)),
        );
        match &self.kernel.mixing_factor {
            None => raw,
            Some(l) => l * raw,
        }
    }
}

impl<K: ScalarKernel> VectorField for GaussianVectorFieldSample<K> {
    fn manifold(&self) -> &Manifold {
        self.kernel.manifold()
    }

    fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        let p = self.kernel.frame(x)?;
        Ok(p * self.ambient(x))
    }
}
