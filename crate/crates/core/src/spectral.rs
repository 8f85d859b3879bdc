//! Scalar kernels: truncated Laplace–Beltrami expansions on compact manifolds,
//! stationary Euclidean kernels, their products, and the random-feature maps
//! used to draw prior samples.
//!
//! On a compact manifold with Laplacian eigenpairs `(λ_i, ψ_i)` the kernel is
//!
//! ```text
//! k(x, x') = C Σ_i Φ(λ_i) ψ_i(x) ψ_i(x')
//! ```
//!
//! with `Φ(λ) = (2ν/ℓ² + λ)^-(ν + d/2)` (Matérn) or `exp(-ℓ²λ/2)` (squared
//! exponential) and `C` chosen so that `k(x, x) = σ²`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GvfError, Result};
use crate::harmonics::{harmonic_index, legendre_polynomials, real_harmonic, real_harmonics};
use crate::manifold::Manifold;
use crate::seed;

/// Default truncation for kernels on the circle (eigenpair count).
pub const CIRCLE_TRUNCATION: usize = 101;
/// Default maximum spherical-harmonic degree.
pub const SPHERE_MAX_DEGREE: usize = 30;
/// Default truncation for kernels on the torus (eigenpair count).
pub const TORUS_TRUNCATION: usize = 401;
/// Default number of random Fourier features.
pub const DEFAULT_RFF_COUNT: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Matern12,
    Matern32,
    Matern52,
    SquaredExponential,
}

impl KernelFamily {
    /// Smoothness ν; infinite for the squared exponential.
    pub fn nu(self) -> f64 {
        match self {
            KernelFamily::Matern12 => 0.5,
            KernelFamily::Matern32 => 1.5,
            KernelFamily::Matern52 => 2.5,
            KernelFamily::SquaredExponential => f64::INFINITY,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "matern12" | "matern-1/2" => Ok(KernelFamily::Matern12),
            "matern32" | "matern-3/2" => Ok(KernelFamily::Matern32),
            "matern52" | "matern-5/2" => Ok(KernelFamily::Matern52),
            "se" | "rbf" | "squared-exponential" => Ok(KernelFamily::SquaredExponential),
            other => Err(GvfError::Config(format!("unknown kernel family '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Matern12 => "matern12",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::SquaredExponential => "se",
        }
    }
}

/// Unnormalized spectral weight `Φ(λ)` of a Matérn-ν (or, for `ν = ∞`,
/// squared-exponential) kernel on a `dim`-dimensional manifold.
pub fn spectral_weight(nu: f64, lengthscale: f64, dim: usize, eigenvalue: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(GvfError::Domain(format!("smoothness must be positive, got {nu}")));
    }
    if !(lengthscale > 0.0) || !(eigenvalue >= 0.0) {
        return Err(GvfError::Domain(format!(
            "need lengthscale > 0 and eigenvalue >= 0, got {lengthscale} and {eigenvalue}"
        )));
    }
    if nu.is_infinite() {
        Ok((-0.5 * lengthscale * lengthscale * eigenvalue).exp())
    } else {
        let base = 2.0 * nu / (lengthscale * lengthscale) + eigenvalue;
        Ok(base.powf(-(nu + 0.5 * dim as f64)))
    }
}

/// One factor of a (possibly product) Laplacian eigenfunction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafFunction {
    /// `1/√(2π)` for frequency 0, otherwise `cos(kθ)/√π` or `sin(kθ)/√π`.
    Circle { frequency: u32, sine: bool },
    /// Real orthonormal spherical harmonic.
    Harmonic { degree: u32, order: i32 },
}

impl LeafFunction {
    fn chart_dim(self) -> usize {
        match self {
            LeafFunction::Circle { .. } => 1,
            LeafFunction::Harmonic { .. } => 2,
        }
    }

    fn eval(self, x: &[f64]) -> f64 {
        match self {
            LeafFunction::Circle { frequency: 0, .. } => 1.0 / TAU.sqrt(),
            LeafFunction::Circle { frequency, sine } => {
                let a = frequency as f64 * x[0];
                (if sine { a.sin() } else { a.cos() }) / PI.sqrt()
            }
            LeafFunction::Harmonic { degree, order } => real_harmonic(degree, order, x[0], x[1]),
        }
    }
}

/// L²-normalized Laplacian eigenfunction, a product of one leaf function per
/// compact factor in chart order.
#[derive(Clone, Debug, PartialEq)]
pub struct Eigenfunction {
    leaves: Vec<LeafFunction>,
}

impl Eigenfunction {
    pub fn leaves(&self) -> &[LeafFunction] {
        &self.leaves
    }

    pub fn eval(&self, chart: &[f64]) -> f64 {
        let mut offset = 0;
        let mut value = 1.0;
        for leaf in &self.leaves {
            let n = leaf.chart_dim();
            value *= leaf.eval(&chart[offset..offset + n]);
            offset += n;
        }
        value
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub eigenvalue: f64,
    pub function: Eigenfunction,
    /// Position within its eigenspace.
    pub multiplicity_index: usize,
}

fn assign_multiplicity(pairs: &mut [EigenPair]) {
    let mut run = 0;
    for i in 0..pairs.len() {
        if i > 0 && same_eigenvalue(pairs[i - 1].eigenvalue, pairs[i].eigenvalue) {
            run += 1;
        } else {
            run = 0;
        }
        pairs[i].multiplicity_index = run;
    }
}

fn same_eigenvalue(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn circle_eigenpairs(count: usize) -> Vec<EigenPair> {
    let mut out = Vec::with_capacity(count);
    out.push(LeafFunction::Circle {
        frequency: 0,
        sine: false,
    });
    let mut k = 1u32;
    while out.len() < count {
        out.push(LeafFunction::Circle {
            frequency: k,
            sine: false,
        });
        out.push(LeafFunction::Circle {
            frequency: k,
            sine: true,
        });
        k += 1;
    }
    out.truncate(count);
    let mut pairs: Vec<_> = out
        .into_iter()
        .map(|leaf| {
            let LeafFunction::Circle { frequency, .. } = leaf else {
                unreachable!()
            };
            EigenPair {
                eigenvalue: (frequency as f64).powi(2),
                function: Eigenfunction { leaves: vec![leaf] },
                multiplicity_index: 0,
            }
        })
        .collect();
    assign_multiplicity(&mut pairs);
    pairs
}

fn sphere_eigenpairs(count: usize) -> Vec<EigenPair> {
    let mut out = Vec::with_capacity(count);
    let mut l = 0u32;
    'outer: loop {
        for m in -(l as i32)..=(l as i32) {
            if out.len() == count {
                break 'outer;
            }
            out.push(EigenPair {
                eigenvalue: (l * (l + 1)) as f64,
                function: Eigenfunction {
                    leaves: vec![LeafFunction::Harmonic {
                        degree: l,
                        order: m,
                    }],
                },
                multiplicity_index: (m + l as i32) as usize,
            });
        }
        l += 1;
    }
    out
}

/// The `count` smallest Laplace–Beltrami eigenpairs, sorted ascending.
///
/// Supports the circle, the sphere and products of compact manifolds.
pub fn laplacian_eigenpairs(manifold: &Manifold, count: usize) -> Result<Vec<EigenPair>> {
    if count == 0 {
        return Err(GvfError::Domain("eigenpair count must be at least 1".into()));
    }
    match manifold {
        Manifold::Circle => Ok(circle_eigenpairs(count)),
        Manifold::Sphere => Ok(sphere_eigenpairs(count)),
        Manifold::Euclidean(_) => Err(GvfError::Capability(
            "Euclidean space has no discrete Laplacian spectrum".into(),
        )),
        Manifold::Product(factors) => {
            let mut iter = factors.iter();
            let first = iter
                .next()
                .ok_or_else(|| GvfError::Capability("empty product manifold".into()))?;
            let mut acc = laplacian_eigenpairs(first, count)?;
            for f in iter {
                let next = laplacian_eigenpairs(f, count)?;
                acc = product_eigenpairs(&acc, &next, count);
            }
            Ok(acc)
        }
    }
}

/// Smallest `count` product pairs `(α_i + β_j, f_i g_j)` of two ascending
/// spectra, produced by a lazy heap merge that never forms the full cross
/// product.
pub fn product_eigenpairs(first: &[EigenPair], second: &[EigenPair], count: usize) -> Vec<EigenPair> {
    #[derive(PartialEq)]
    struct Key(f64, usize, usize);
    impl Eq for Key {}
    impl PartialOrd for Key {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Key {
        fn cmp(&self, other: &Self) -> Ordering {
            self.0
                .total_cmp(&other.0)
                .then(self.1.cmp(&other.1))
                .then(self.2.cmp(&other.2))
        }
    }

    let mut out = Vec::with_capacity(count);
    if second.is_empty() {
        return out;
    }
    let mut heap = BinaryHeap::new();
    for (i, a) in first.iter().enumerate().take(count) {
        heap.push(Reverse(Key(a.eigenvalue + second[0].eigenvalue, i, 0)));
    }
    while out.len() < count {
        let Some(Reverse(Key(lambda, i, j))) = heap.pop() else {
            break;
        };
        let mut leaves = first[i].function.leaves.clone();
        leaves.extend_from_slice(&second[j].function.leaves);
        out.push(EigenPair {
            eigenvalue: lambda,
            function: Eigenfunction { leaves },
            multiplicity_index: 0,
        });
        if j + 1 < second.len() {
            heap.push(Reverse(Key(
                first[i].eigenvalue + second[j + 1].eigenvalue,
                i,
                j + 1,
            )));
        }
    }
    assign_multiplicity(&mut out);
    out
}

/// At least `count` eigenpairs, extended so that the last eigenspace is
/// complete. Complete eigenspaces keep `Σ_i ψ_i(x)²` constant on homogeneous
/// manifolds.
pub fn complete_eigenpairs(manifold: &Manifold, count: usize) -> Result<Vec<EigenPair>> {
    let mut pairs = laplacian_eigenpairs(manifold, 2 * count + 64)?;
    let last = pairs[count.min(pairs.len()) - 1].eigenvalue;
    let end = (count..pairs.len())
        .find(|&i| !same_eigenvalue(pairs[i].eigenvalue, last))
        .unwrap_or(pairs.len());
    pairs.truncate(end);
    Ok(pairs)
}

/// Evaluates all eigenfunctions of one spectrum at a point, sharing the
/// per-factor trigonometric and harmonic tables.
#[derive(Clone, Debug)]
pub struct BasisEvaluator {
    functions: Vec<Eigenfunction>,
    slots: Vec<Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Circle { max_frequency: u32 },
    Sphere { max_degree: u32 },
}

impl BasisEvaluator {
    pub fn new(pairs: &[EigenPair]) -> Self {
        let functions: Vec<_> = pairs.iter().map(|p| p.function.clone()).collect();
        let mut slots: Vec<Slot> = Vec::new();
        for f in &functions {
            for (s, leaf) in f.leaves.iter().enumerate() {
                let fresh = match leaf {
                    LeafFunction::Circle { frequency, .. } => Slot::Circle {
                        max_frequency: *frequency,
                    },
                    LeafFunction::Harmonic { degree, .. } => Slot::Sphere { max_degree: *degree },
                };
                if s == slots.len() {
                    slots.push(fresh);
                } else {
                    slots[s] = match (slots[s], fresh) {
                        (Slot::Circle { max_frequency: a }, Slot::Circle { max_frequency: b }) => {
                            Slot::Circle {
                                max_frequency: a.max(b),
                            }
                        }
                        (Slot::Sphere { max_degree: a }, Slot::Sphere { max_degree: b }) => {
                            Slot::Sphere {
                                max_degree: a.max(b),
                            }
                        }
                        _ => unreachable!("eigenfunctions of one spectrum share a layout"),
                    };
                }
            }
        }
        BasisEvaluator { functions, slots }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// `ψ_i(chart)` for every eigenfunction.
    pub fn eval(&self, chart: &[f64]) -> Vec<f64> {
        let mut offset = 0;
        let tables: Vec<Vec<f64>> = self
            .slots
            .iter()
            .map(|slot| match *slot {
                Slot::Circle { max_frequency } => {
                    let t = chart[offset];
                    offset += 1;
                    let mut v = Vec::with_capacity(2 * max_frequency as usize + 1);
                    v.push(1.0 / TAU.sqrt());
                    let norm = 1.0 / PI.sqrt();
                    for k in 1..=max_frequency {
                        let (s, c) = (k as f64 * t).sin_cos();
                        v.push(c * norm);
                        v.push(s * norm);
                    }
                    v
                }
                Slot::Sphere { max_degree } => {
                    let (phi, theta) = (chart[offset], chart[offset + 1]);
                    offset += 2;
                    real_harmonics(max_degree, phi, theta)
                }
            })
            .collect();
        self.functions
            .iter()
            .map(|f| {
                f.leaves
                    .iter()
                    .zip(&tables)
                    .map(|(leaf, table)| match *leaf {
                        LeafFunction::Circle { frequency: 0, .. } => table[0],
                        LeafFunction::Circle { frequency, sine } => {
                            table[2 * frequency as usize - 1 + usize::from(sine)]
                        }
                        LeafFunction::Harmonic { degree, order } => {
                            table[harmonic_index(degree, order)]
                        }
                    })
                    .product()
            })
            .collect()
    }
}

/// Common interface of scalar kernels on a manifold chart.
pub trait ScalarKernel: Send + Sync {
    fn manifold(&self) -> &Manifold;

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64>;

    /// `k(x, x)` on homogeneous spaces, the amplitude σ².
    fn variance(&self) -> f64;

    fn lengthscales(&self) -> Vec<f64>;

    fn with_lengthscales(&self, lengthscales: &[f64]) -> Result<Self>
    where
        Self: Sized;

    /// Combined RFF/KL feature map whose random functions have this kernel as
    /// covariance (in expectation over the random features).
    fn feature_map(&self, rff_count: usize, seed: u64) -> Result<FeatureMap>;

    fn gram(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(xs.len(), ys.len());
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                out[(i, j)] = self.eval(x, y)?;
            }
        }
        Ok(out)
    }
}

fn check_point(manifold: &Manifold, x: &[f64]) -> Result<()> {
    if x.len() != manifold.intrinsic_dim() {
        return Err(GvfError::shape(
            format!("{}-dimensional point on {manifold}", manifold.intrinsic_dim()),
            format!("length {}", x.len()),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Zonal {
    /// Weight per frequency `0..=K`.
    Circle(Vec<f64>),
    /// Weight per degree `0..=L`.
    Sphere(Vec<f64>),
}

/// Matérn / squared-exponential kernel on a compact manifold via its truncated
/// Laplacian spectrum.
#[derive(Clone)]
pub struct SpectralScalarKernel {
    manifold: Manifold,
    family: KernelFamily,
    lengthscale: f64,
    amplitude: f64,
    pairs: Arc<Vec<EigenPair>>,
    basis: Arc<BasisEvaluator>,
    /// `C Φ(λ_i)`.
    weights: Vec<f64>,
    normalization: f64,
    zonal: Option<Zonal>,
}

impl fmt::Debug for SpectralScalarKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralScalarKernel")
            .field("manifold", &self.manifold)
            .field("family", &self.family)
            .field("lengthscale", &self.lengthscale)
            .field("amplitude", &self.amplitude)
            .field("truncation", &self.pairs.len())
            .finish()
    }
}

/// Default eigenpair count for a compact manifold.
pub fn default_truncation(manifold: &Manifold) -> usize {
    match manifold {
        Manifold::Circle => CIRCLE_TRUNCATION,
        Manifold::Sphere => (SPHERE_MAX_DEGREE + 1).pow(2),
        _ => TORUS_TRUNCATION,
    }
}

impl SpectralScalarKernel {
    /// Builds the kernel from the first `truncation` eigenpairs, extended to
    /// complete the last eigenspace.
    pub fn new(
        manifold: Manifold,
        family: KernelFamily,
        lengthscale: f64,
        amplitude: f64,
        truncation: usize,
    ) -> Result<Self> {
        if !manifold.is_compact() {
            return Err(GvfError::Capability(format!(
                "spectral kernels need a compact manifold, got {manifold}"
            )));
        }
        let pairs = complete_eigenpairs(&manifold, truncation)?;
        let basis = BasisEvaluator::new(&pairs);
        Self::from_parts(
            manifold,
            family,
            lengthscale,
            amplitude,
            Arc::new(pairs),
            Arc::new(basis),
        )
    }

    pub fn with_default_truncation(
        manifold: Manifold,
        family: KernelFamily,
        lengthscale: f64,
        amplitude: f64,
    ) -> Result<Self> {
        let t = default_truncation(&manifold);
        Self::new(manifold, family, lengthscale, amplitude, t)
    }

    fn from_parts(
        manifold: Manifold,
        family: KernelFamily,
        lengthscale: f64,
        amplitude: f64,
        pairs: Arc<Vec<EigenPair>>,
        basis: Arc<BasisEvaluator>,
    ) -> Result<Self> {
        if !(amplitude > 0.0) {
            return Err(GvfError::Domain(format!("amplitude must be positive, got {amplitude}")));
        }
        let d = manifold.intrinsic_dim();
        let raw = pairs
            .iter()
            .map(|p| spectral_weight(family.nu(), lengthscale, d, p.eigenvalue))
            .collect::<Result<Vec<_>>>()?;
        let reference = vec![0.0; d];
        let diag: f64 = basis
            .eval(&reference)
            .iter()
            .zip(&raw)
            .map(|(psi, w)| w * psi * psi)
            .sum();
        let normalization = amplitude / diag;
        let weights: Vec<f64> = raw.iter().map(|w| w * normalization).collect();
        let zonal = match manifold {
            Manifold::Circle => {
                let mut per = vec![0.0; pairs.last().map_or(0, |p| p.eigenvalue.sqrt() as usize) + 1];
                for (p, w) in pairs.iter().zip(&weights) {
                    per[p.eigenvalue.sqrt().round() as usize] = *w;
                }
                Some(Zonal::Circle(per))
            }
            Manifold::Sphere => {
                let mut per = Vec::new();
                for (p, w) in pairs.iter().zip(&weights) {
                    if p.multiplicity_index == 0 {
                        per.push(*w);
                    }
                }
                Some(Zonal::Sphere(per))
            }
            _ => None,
        };
        Ok(SpectralScalarKernel {
            manifold,
            family,
            lengthscale,
            amplitude,
            pairs,
            basis,
            weights,
            normalization,
            zonal,
        })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn eigenpairs(&self) -> &[EigenPair] {
        &self.pairs
    }

    pub fn basis(&self) -> &BasisEvaluator {
        &self.basis
    }

    /// Rescaled spectral weights `C Φ(λ_i)`, the KL variances.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn truncation(&self) -> usize {
        self.pairs.len()
    }

    /// Feature vector `(√w_i ψ_i(x))_i`; kernel values are inner products of these.
    pub fn features(&self, x: &[f64]) -> DVector<f64> {
        let psi = self.basis.eval(x);
        DVector::from_iterator(
            psi.len(),
            psi.iter().zip(&self.weights).map(|(p, w)| p * w.sqrt()),
        )
    }

    /// Kernel value by the explicit eigenfunction sum, independent of the
    /// closed-form zonal route used by [`ScalarKernel::eval`].
    pub fn eval_by_basis(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_point(&self.manifold, x)?;
        check_point(&self.manifold, y)?;
        let (a, b) = (self.basis.eval(x), self.basis.eval(y));
        Ok(a.iter()
            .zip(&b)
            .zip(&self.weights)
            .map(|((p, q), w)| w * p * q)
            .sum())
    }
}

impl ScalarKernel for SpectralScalarKernel {
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match &self.zonal {
            Some(Zonal::Circle(w)) => {
                check_point(&self.manifold, x)?;
                check_point(&self.manifold, y)?;
                // cos(kδ) by the Chebyshev recurrence.
                let c1 = (x[0] - y[0]).cos();
                let (mut prev, mut cur) = (1.0, c1);
                let mut acc = 0.0;
                for wk in w.iter().skip(1) {
                    acc += wk * cur;
                    (prev, cur) = (cur, 2.0 * c1 * cur - prev);
                }
                Ok(w[0] / TAU + acc / PI)
            }
            Some(Zonal::Sphere(w)) => {
                check_point(&self.manifold, x)?;
                check_point(&self.manifold, y)?;
                let cos_gamma = (x[0].cos() * y[0].cos()
                    + x[0].sin() * y[0].sin() * (x[1] - y[1]).cos())
                .clamp(-1.0, 1.0);
                let p = legendre_polynomials(w.len() as u32 - 1, cos_gamma);
                Ok(w
                    .iter()
                    .zip(&p)
                    .enumerate()
                    .map(|(l, (wl, pl))| wl * (2.0 * l as f64 + 1.0) / (4.0 * PI) * pl)
                    .sum())
            }
            None => self.eval_by_basis(x, y),
        }
    }

    fn variance(&self) -> f64 {
        self.amplitude
    }

    fn lengthscales(&self) -> Vec<f64> {
        vec![self.lengthscale]
    }

    fn with_lengthscales(&self, lengthscales: &[f64]) -> Result<Self> {
        let [l] = lengthscales else {
            return Err(GvfError::shape("1 lengthscale", lengthscales.len()));
        };
        Self::from_parts(
            self.manifold.clone(),
            self.family,
            *l,
            self.amplitude,
            Arc::clone(&self.pairs),
            Arc::clone(&self.basis),
        )
    }

    fn feature_map(&self, _rff_count: usize, seed: u64) -> Result<FeatureMap> {
        combined_feature_map(None, Some(self), 1, self.truncation(), seed)
    }

    fn gram(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        if self.zonal.is_some() {
            let mut out = DMatrix::zeros(xs.len(), ys.len());
            for (i, x) in xs.iter().enumerate() {
                for (j, y) in ys.iter().enumerate() {
                    out[(i, j)] = self.eval(x, y)?;
                }
            }
            return Ok(out);
        }
        for p in xs.iter().chain(ys) {
            check_point(&self.manifold, p)?;
        }
        let fx = DMatrix::from_columns(&xs.iter().map(|x| self.features(x)).collect::<Vec<_>>());
        let fy = DMatrix::from_columns(&ys.iter().map(|y| self.features(y)).collect::<Vec<_>>());
        Ok(fx.transpose() * fy)
    }
}

/// Stationary Matérn / squared-exponential kernel on ℝⁿ with per-axis lengthscales.
#[derive(Clone, Debug)]
pub struct EuclideanKernel {
    manifold: Manifold,
    family: KernelFamily,
    lengthscales: Vec<f64>,
    amplitude: f64,
}

impl EuclideanKernel {
    pub fn new(family: KernelFamily, lengthscales: Vec<f64>, amplitude: f64) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(GvfError::Domain(format!(
                "lengthscales must be positive, got {lengthscales:?}"
            )));
        }
        if !(amplitude > 0.0) {
            return Err(GvfError::Domain(format!("amplitude must be positive, got {amplitude}")));
        }
        Ok(EuclideanKernel {
            manifold: Manifold::Euclidean(lengthscales.len()),
            family,
            lengthscales,
            amplitude,
        })
    }

    pub fn isotropic(dim: usize, family: KernelFamily, lengthscale: f64, amplitude: f64) -> Result<Self> {
        Self::new(family, vec![lengthscale; dim], amplitude)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    /// Kernel value as a function of the lengthscale-scaled distance `r`.
    pub fn profile(&self, r: f64) -> f64 {
        let s = self.amplitude;
        match self.family {
            KernelFamily::Matern12 => s * (-r).exp(),
            KernelFamily::Matern32 => {
                let a = 3f64.sqrt() * r;
                s * (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern52 => {
                let a = 5f64.sqrt() * r;
                s * (1.0 + a + a * a / 3.0) * (-a).exp()
            }
            KernelFamily::SquaredExponential => s * (-0.5 * r * r).exp(),
        }
    }

    /// Draws a frequency from the normalized spectral density: Gaussian for the
    /// squared exponential, multivariate Student-t with 2ν degrees of freedom
    /// for Matérn-ν.
    pub fn sample_frequency<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let nu = self.family.nu();
        let scale = if nu.is_infinite() {
            1.0
        } else {
            let chi: f64 = ChiSquared::new(2.0 * nu).expect("positive dof").sample(rng);
            (2.0 * nu / chi).sqrt()
        };
        self.lengthscales
            .iter()
            .map(|l| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale / l
            })
            .collect()
    }
}

impl ScalarKernel for EuclideanKernel {
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_point(&self.manifold, x)?;
        check_point(&self.manifold, y)?;
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| ((a - b) / l).powi(2))
            .sum();
        Ok(self.profile(r2.sqrt()))
    }

    fn variance(&self) -> f64 {
        self.amplitude
    }

    fn lengthscales(&self) -> Vec<f64> {
        self.lengthscales.clone()
    }

    fn with_lengthscales(&self, lengthscales: &[f64]) -> Result<Self> {
        if lengthscales.len() != self.dim() {
            return Err(GvfError::shape(self.dim(), lengthscales.len()));
        }
        Self::new(self.family, lengthscales.to_vec(), self.amplitude)
    }

    fn feature_map(&self, rff_count: usize, seed: u64) -> Result<FeatureMap> {
        combined_feature_map(Some(self), None, rff_count, 1, seed)
    }
}

/// Product `k_C(m, m') k_E(e, e')` of a compact spectral kernel and a Euclidean
/// kernel on `M × ℝⁿ`; chart coordinates are the compact ones followed by the
/// Euclidean ones.
#[derive(Clone, Debug)]
pub struct ProductKernel {
    manifold: Manifold,
    compact: SpectralScalarKernel,
    euclidean: EuclideanKernel,
}

impl ProductKernel {
    pub fn new(compact: SpectralScalarKernel, euclidean: EuclideanKernel) -> Self {
        let manifold = crate::manifold::product(
            compact.manifold().clone(),
            Manifold::Euclidean(euclidean.dim()),
        );
        ProductKernel {
            manifold,
            compact,
            euclidean,
        }
    }

    pub fn compact(&self) -> &SpectralScalarKernel {
        &self.compact
    }

    pub fn euclidean(&self) -> &EuclideanKernel {
        &self.euclidean
    }

    fn split(&self) -> usize {
        self.compact.manifold().intrinsic_dim()
    }
}

impl ScalarKernel for ProductKernel {
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_point(&self.manifold, x)?;
        check_point(&self.manifold, y)?;
        let s = self.split();
        Ok(self.compact.eval(&x[..s], &y[..s])? * self.euclidean.eval(&x[s..], &y[s..])?)
    }

    fn variance(&self) -> f64 {
        self.compact.variance() * self.euclidean.variance()
    }

    fn lengthscales(&self) -> Vec<f64> {
        let mut l = self.compact.lengthscales();
        l.extend(self.euclidean.lengthscales());
        l
    }

    fn with_lengthscales(&self, lengthscales: &[f64]) -> Result<Self> {
        if lengthscales.len() != 1 + self.euclidean.dim() {
            return Err(GvfError::shape(1 + self.euclidean.dim(), lengthscales.len()));
        }
        Ok(ProductKernel::new(
            self.compact.with_lengthscales(&lengthscales[..1])?,
            self.euclidean.with_lengthscales(&lengthscales[1..])?,
        ))
    }

    fn feature_map(&self, rff_count: usize, seed: u64) -> Result<FeatureMap> {
        combined_feature_map(
            Some(&self.euclidean),
            Some(&self.compact),
            rff_count,
            self.compact.truncation(),
            seed,
        )
    }
}

/// Random Fourier features `φ_i(e) = √(2σ²) cos(ω_i·e + b_i)` with `ω_i` drawn
/// from the kernel's spectral density and `b_i ~ U[0, 2π)`.
#[derive(Clone, Debug)]
pub struct RffBasis {
    frequencies: Vec<Vec<f64>>,
    phases: Vec<f64>,
    scale: f64,
}

pub fn rff_features(kernel: &EuclideanKernel, count: usize, seed: u64) -> Result<RffBasis> {
    if count == 0 {
        return Err(GvfError::Domain("feature count must be at least 1".into()));
    }
    let mut rng = seed::rng_for(seed, "rff");
    let mut frequencies = Vec::with_capacity(count);
    let mut phases = Vec::with_capacity(count);
    for _ in 0..count {
        frequencies.push(kernel.sample_frequency(&mut rng));
        phases.push(rng.random::<f64>() * TAU);
    }
    Ok(RffBasis {
        frequencies,
        phases,
        scale: (2.0 * kernel.variance()).sqrt(),
    })
}

impl RffBasis {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn eval(&self, e: &[f64]) -> Vec<f64> {
        self.frequencies
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| {
                let arg: f64 = w.iter().zip(e).map(|(a, x)| a * x).sum::<f64>() + b;
                self.scale * arg.cos()
            })
            .collect()
    }

    /// `l⁻¹ Φ(e)ᵀ Φ(e')`.
    pub fn implied_kernel(&self, e: &[f64], e2: &[f64]) -> f64 {
        let a = self.eval(e);
        let b = self.eval(e2);
        a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / self.len() as f64
    }
}

/// Feature map `f(e, m) = l^{-1/2} Σ_i Σ_j w_ij φ_i(e) ψ_j(m)` with
/// `w_ij ~ N(0, λ̃_j)`, combining random Fourier features on the Euclidean
/// coordinates with a truncated KL basis on the compact ones. A missing part
/// contributes the single constant feature 1 (with unit weight variance).
#[derive(Clone, Debug)]
pub struct FeatureMap {
    dim: usize,
    compact: Option<(Range<usize>, Arc<BasisEvaluator>, Vec<f64>)>,
    euclidean: Option<(Range<usize>, RffBasis)>,
}

pub fn combined_feature_map(
    euclidean: Option<&EuclideanKernel>,
    compact: Option<&SpectralScalarKernel>,
    rff_count: usize,
    kl_count: usize,
    seed: u64,
) -> Result<FeatureMap> {
    if rff_count == 0 || kl_count == 0 {
        return Err(GvfError::Domain("feature counts must be at least 1".into()));
    }
    let compact_dim = compact.map_or(0, |k| k.manifold().intrinsic_dim());
    let compact = match compact {
        Some(k) => {
            if kl_count > k.truncation() {
                return Err(GvfError::shape(
                    format!("at most {} KL terms", k.truncation()),
                    kl_count,
                ));
            }
            let basis = if kl_count == k.truncation() {
                Arc::clone(&k.basis)
            } else {
                Arc::new(BasisEvaluator::new(&k.pairs[..kl_count]))
            };
            Some((0..compact_dim, basis, k.weights[..kl_count].to_vec()))
        }
        None => None,
    };
    let euclidean = match euclidean {
        Some(k) => Some((
            compact_dim..compact_dim + k.dim(),
            rff_features(k, rff_count, seed)?,
        )),
        None => None,
    };
    let dim = compact_dim + euclidean.as_ref().map_or(0, |(r, _)| r.len());
    Ok(FeatureMap {
        dim,
        compact,
        euclidean,
    })
}

impl FeatureMap {
    pub fn chart_dim(&self) -> usize {
        self.dim
    }

    /// Number of Euclidean features `l` (1 without a Euclidean part).
    pub fn rff_len(&self) -> usize {
        self.euclidean.as_ref().map_or(1, |(_, b)| b.len())
    }

    /// Number of KL terms `k` (1 without a compact part).
    pub fn kl_len(&self) -> usize {
        self.compact.as_ref().map_or(1, |(_, b, _)| b.len())
    }

    pub fn rff_values(&self, x: &[f64]) -> Vec<f64> {
        match &self.euclidean {
            Some((r, b)) => b.eval(&x[r.clone()]),
            None => vec![1.0],
        }
    }

    pub fn kl_values(&self, x: &[f64]) -> Vec<f64> {
        match &self.compact {
            Some((r, b, _)) => b.eval(&x[r.clone()]),
            None => vec![1.0],
        }
    }

    /// Weight variances `λ̃_j`.
    pub fn kl_variances(&self) -> Vec<f64> {
        match &self.compact {
            Some((_, _, v)) => v.clone(),
            None => vec![1.0],
        }
    }

    /// Draws `w_ij ~ N(0, λ̃_j)` as an `l × k` matrix.
    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let sd: Vec<f64> = self.kl_variances().iter().map(|v| v.sqrt()).collect();
        DMatrix::from_fn(self.rff_len(), self.kl_len(), |_, j| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd[j]
        })
    }

    pub fn eval_with(&self, weights: &DMatrix<f64>, x: &[f64]) -> f64 {
        let phi = self.rff_values(x);
        let psi = DVector::from_vec(self.kl_values(x));
        let inner = weights * psi;
        phi.iter().zip(inner.iter()).map(|(a, b)| a * b).sum::<f64>() / (self.rff_len() as f64).sqrt()
    }

    /// Implied (finite-feature) covariance between `x` and `y`.
    pub fn implied_kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let (px, py) = (self.rff_values(x), self.rff_values(y));
        let rff: f64 = px.iter().zip(&py).map(|(a, b)| a * b).sum::<f64>() / self.rff_len() as f64;
        let kl: f64 = self
            .kl_values(x)
            .iter()
            .zip(self.kl_values(y))
            .zip(self.kl_variances())
            .map(|((a, b), v)| a * b * v)
            .sum();
        rff * kl
    }

    pub fn sample(self: &Arc<Self>, seed: u64) -> ScalarFieldSample {
        let mut rng = seed::rng_for(seed, "weights");
        ScalarFieldSample {
            weights: self.sample_weights(&mut rng),
            map: Arc::clone(self),
        }
    }
}

/// One random scalar function drawn from a [`FeatureMap`].
#[derive(Clone, Debug)]
pub struct ScalarFieldSample {
    map: Arc<FeatureMap>,
    weights: DMatrix<f64>,
}

impl ScalarFieldSample {
    pub fn from_weights(map: Arc<FeatureMap>, weights: DMatrix<f64>) -> Result<Self> {
        if weights.shape() != (map.rff_len(), map.kl_len()) {
            return Err(GvfError::shape(
                format!("{}x{} weights", map.rff_len(), map.kl_len()),
                format!("{}x{}", weights.nrows(), weights.ncols()),
            ));
        }
        Ok(ScalarFieldSample { map, weights })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.map.eval_with(&self.weights, x)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }
}

/// Closed set of the shipped scalar kernels, for configuration-driven code.
#[derive(Clone, Debug)]
pub enum AnyScalarKernel {
    Spectral(SpectralScalarKernel),
    Euclidean(EuclideanKernel),
    Product(ProductKernel),
}

impl AnyScalarKernel {
    /// Builds the natural kernel for `manifold`: spectral on compact manifolds,
    /// stationary on ℝⁿ, compact × Euclidean products otherwise. `lengthscales`
    /// holds one value (shared) or one per factor.
    pub fn build(
        manifold: &Manifold,
        family: KernelFamily,
        lengthscales: &[f64],
        amplitude: f64,
        truncation: Option<usize>,
    ) -> Result<Self> {
        let first = *lengthscales
            .first()
            .ok_or_else(|| GvfError::Config("at least one lengthscale is required".into()))?;
        if manifold.is_compact() {
            let t = truncation.unwrap_or_else(|| default_truncation(manifold));
            return Ok(AnyScalarKernel::Spectral(SpectralScalarKernel::new(
                manifold.clone(),
                family,
                first,
                amplitude,
                t,
            )?));
        }
        match manifold {
            Manifold::Euclidean(n) => {
                let ls = if lengthscales.len() == *n {
                    lengthscales.to_vec()
                } else {
                    vec![first; *n]
                };
                Ok(AnyScalarKernel::Euclidean(EuclideanKernel::new(family, ls, amplitude)?))
            }
            Manifold::Product(fs) => {
                let split = fs.iter().take_while(|f| f.is_compact()).count();
                let (compact, rest) = fs.split_at(split);
                let n = rest
                    .iter()
                    .map(|m| match m {
                        Manifold::Euclidean(n) => Ok(*n),
                        other => Err(GvfError::Capability(format!(
                            "product kernels need compact factors followed by Euclidean ones, found {other}"
                        ))),
                    })
                    .sum::<Result<usize>>()?;
                let compact_manifold = match compact {
                    [] => return Err(GvfError::Capability("product without compact factor".into())),
                    [single] => single.clone(),
                    many => Manifold::Product(many.to_vec()),
                };
                let t = truncation.unwrap_or_else(|| default_truncation(&compact_manifold));
                let compact_kernel =
                    SpectralScalarKernel::new(compact_manifold, family, first, 1.0, t)?;
                let second = lengthscales.get(1).copied().unwrap_or(first);
                let euclidean = EuclideanKernel::isotropic(n, family, second, amplitude)?;
                let mut kernel = ProductKernel::new(compact_kernel, euclidean);
                // Same chart layout; keep the caller's factorization.
                kernel.manifold = manifold.clone();
                Ok(AnyScalarKernel::Product(kernel))
            }
            _ => unreachable!("compact manifolds handled above"),
        }
    }
}

macro_rules! delegate {
    ($self:ident, $k:ident => $e:expr) => {
        match $self {
            AnyScalarKernel::Spectral($k) => $e,
            AnyScalarKernel::Euclidean($k) => $e,
            AnyScalarKernel::Product($k) => $e,
        }
    };
}

impl ScalarKernel for AnyScalarKernel {
    fn manifold(&self) -> &Manifold {
        delegate!(self, k => k.manifold())
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        delegate!(self, k => k.eval(x, y))
    }

    fn variance(&self) -> f64 {
        delegate!(self, k => k.variance())
    }

    fn lengthscales(&self) -> Vec<f64> {
        delegate!(self, k => k.lengthscales())
    }

    fn with_lengthscales(&self, lengthscales: &[f64]) -> Result<Self> {
        Ok(match self {
            AnyScalarKernel::Spectral(k) => AnyScalarKernel::Spectral(k.with_lengthscales(lengthscales)?),
            AnyScalarKernel::Euclidean(k) => AnyScalarKernel::Euclidean(k.with_lengthscales(lengthscales)?),
            AnyScalarKernel::Product(k) => AnyScalarKernel::Product(k.with_lengthscales(lengthscales)?),
        })
    }

    fn feature_map(&self, rff_count: usize, seed: u64) -> Result<FeatureMap> {
        delegate!(self, k => k.feature_map(rff_count, seed))
    }

    fn gram(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        delegate!(self, k => k.gram(xs, ys))
    }
}
