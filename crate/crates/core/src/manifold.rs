//! Embedded Riemannian manifolds, frames and projection matrices.
//!
//! A manifold is described by a chart, an isometric embedding into a Euclidean
//! ambient space and a global (possibly discontinuous) orthonormal frame. The
//! frame is stored only through its projection matrix `P_x` (d × d'), whose
//! rows are the frame vectors written in ambient coordinates. Frame changes are
//! expressed as [`GaugeField`]s acting on `P_x` from the left.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GvfError, Result};
use crate::seed;

/// Half-width of the box that Euclidean factors draw random points from.
pub const EUCLIDEAN_SAMPLE_HALF_WIDTH: f64 = 3.0;

/// Chart parameterizations shipped with the library.
///
/// * `Circle`: angle θ, embedded as `(cos θ, sin θ)`.
/// * `Sphere`: colatitude φ ∈ [0, π] and longitude θ ∈ [0, 2π), embedded as
///   `(cos θ sin φ, sin θ sin φ, cos φ)`, framed by the unit vectors (φ̂, θ̂) with
///   the θ = 0 frame used at both poles.
/// * `Euclidean(n)`: identity embedding of ℝⁿ.
/// * `Product`: concatenated charts and embeddings, block-diagonal frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Manifold {
    Circle,
    Sphere,
    Euclidean(usize),
    Product(Vec<Manifold>),
}

/// A chart point together with its ambient image and projection matrix.
#[derive(Clone, Debug)]
pub struct FramedPoint {
    pub chart: Vec<f64>,
    pub ambient: DVector<f64>,
    pub projection: DMatrix<f64>,
}

/// Product of two manifolds.
pub fn product(first: Manifold, second: Manifold) -> Manifold {
    Manifold::Product(vec![first, second])
}

impl Manifold {
    /// The pendulum phase space S¹ × ℝ embedded in ℝ³.
    pub fn cylinder() -> Self {
        product(Manifold::Circle, Manifold::Euclidean(1))
    }

    /// The flat torus S¹ × S¹ embedded in ℝ⁴.
    pub fn torus() -> Self {
        product(Manifold::Circle, Manifold::Circle)
    }

    /// Parses the names accepted on the command line.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "circle" => Ok(Manifold::Circle),
            "sphere" => Ok(Manifold::Sphere),
            "torus" => Ok(Manifold::torus()),
            "cylinder" => Ok(Manifold::cylinder()),
            other => {
                if let Some(n) = other.strip_prefix("euclidean") {
                    let n = n.trim_start_matches([':', '-']);
                    let n = if n.is_empty() { Ok(1) } else { n.parse::<usize>() };
                    match n {
                        Ok(n) if n > 0 => return Ok(Manifold::Euclidean(n)),
                        _ => {}
                    }
                }
                Err(GvfError::Config(format!("unknown manifold '{other}'")))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Manifold::Circle => "circle".into(),
            Manifold::Sphere => "sphere".into(),
            Manifold::Euclidean(n) => format!("euclidean:{n}"),
            Manifold::Product(_) if *self == Manifold::torus() => "torus".into(),
            Manifold::Product(_) if *self == Manifold::cylinder() => "cylinder".into(),
            Manifold::Product(fs) => {
                let names: Vec<_> = fs.iter().map(Manifold::name).collect();
                format!("product({})", names.join(","))
            }
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Manifold::Circle => 1,
            Manifold::Sphere => 2,
            Manifold::Euclidean(n) => *n,
            Manifold::Product(fs) => fs.iter().map(Manifold::intrinsic_dim).sum(),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Circle => 2,
            Manifold::Sphere => 3,
            Manifold::Euclidean(n) => *n,
            Manifold::Product(fs) => fs.iter().map(Manifold::ambient_dim).sum(),
        }
    }

    /// True when no factor is Euclidean.
    pub fn is_compact(&self) -> bool {
        match self {
            Manifold::Circle | Manifold::Sphere => true,
            Manifold::Euclidean(_) => false,
            Manifold::Product(fs) => fs.iter().all(Manifold::is_compact),
        }
    }

    /// Period of each chart coordinate, `None` for non-periodic coordinates.
    pub fn periodicity(&self) -> Vec<Option<f64>> {
        match self {
            Manifold::Circle => vec![Some(TAU)],
            Manifold::Sphere => vec![None, Some(TAU)],
            Manifold::Euclidean(n) => vec![None; *n],
            Manifold::Product(fs) => fs.iter().flat_map(Manifold::periodicity).collect(),
        }
    }

    /// Immediate factors with their chart and ambient coordinate ranges.
    pub fn factors(&self) -> Vec<(&Manifold, Range<usize>, Range<usize>)> {
        match self {
            Manifold::Product(fs) => {
                let (mut c, mut a) = (0, 0);
                fs.iter()
                    .map(|f| {
                        let (d, dd) = (f.intrinsic_dim(), f.ambient_dim());
                        let out = (f, c..c + d, a..a + dd);
                        c += d;
                        a += dd;
                        out
                    })
                    .collect()
            }
            _ => vec![(self, 0..self.intrinsic_dim(), 0..self.ambient_dim())],
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.intrinsic_dim() {
            return Err(GvfError::shape(
                format!("{}-dimensional chart point on {}", self.intrinsic_dim(), self),
                format!("length {}", x.len()),
            ));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(GvfError::Domain(format!("non-finite chart coordinate {v}")));
        }
        match self {
            Manifold::Sphere if !(0.0..=PI).contains(&x[0]) => Err(GvfError::Domain(format!(
                "sphere colatitude {} outside [0, pi]",
                x[0]
            ))),
            Manifold::Product(_) => self
                .factors()
                .into_iter()
                .try_for_each(|(f, c, _)| f.check(&x[c])),
            _ => Ok(()),
        }
    }

    /// Canonical chart representative: periodic coordinates reduced into `[0, T)`.
    pub fn reduce(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter()
            .zip(self.periodicity())
            .map(|(&v, period)| match period {
                Some(t) => reduce_periodic(v, t),
                None => v,
            })
            .collect())
    }

    pub fn embed(&self, x: &[f64]) -> Result<DVector<f64>> {
        let x = self.reduce(x)?;
        let mut out = DVector::zeros(self.ambient_dim());
        self.embed_into(&x, out.as_mut_slice());
        Ok(out)
    }

    fn embed_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Manifold::Circle => {
                out[0] = x[0].cos();
                out[1] = x[0].sin();
            }
            Manifold::Sphere => {
                let (phi, theta) = (x[0], x[1]);
                out[0] = theta.cos() * phi.sin();
                out[1] = theta.sin() * phi.sin();
                out[2] = phi.cos();
            }
            Manifold::Euclidean(_) => out.copy_from_slice(x),
            Manifold::Product(_) => {
                for (f, c, a) in self.factors() {
                    f.embed_into(&x[c], &mut out[a]);
                }
            }
        }
    }

    /// Projection matrix `P_x` (d × d') of the shipped orthonormal frame.
    pub fn projection_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let x = self.reduce(x)?;
        let mut p = DMatrix::zeros(self.intrinsic_dim(), self.ambient_dim());
        self.fill_projection(&x, &mut p, 0, 0);
        Ok(p)
    }

    fn fill_projection(&self, x: &[f64], p: &mut DMatrix<f64>, row: usize, col: usize) {
        match self {
            Manifold::Circle => {
                p[(row, col)] = -x[0].sin();
                p[(row, col + 1)] = x[0].cos();
            }
            Manifold::Sphere => {
                let phi = x[0];
                // Both poles use the frame of the θ = 0 meridian.
                let theta = if phi == 0.0 || phi == PI { 0.0 } else { x[1] };
                let (st, ct) = theta.sin_cos();
                let (sp, cp) = phi.sin_cos();
                p[(row, col)] = ct * cp;
                p[(row, col + 1)] = st * cp;
                p[(row, col + 2)] = -sp;
                p[(row + 1, col)] = -st;
                p[(row + 1, col + 1)] = ct;
                p[(row + 1, col + 2)] = 0.0;
            }
            Manifold::Euclidean(n) => {
                for i in 0..*n {
                    p[(row + i, col + i)] = 1.0;
                }
            }
            Manifold::Product(_) => {
                for (f, c, a) in self.factors() {
                    f.fill_projection(&x[c.clone()], p, row + c.start, col + a.start);
                }
            }
        }
    }

    /// Metric in the shipped frame, `P_x P_xᵀ`.
    pub fn metric_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let p = self.projection_matrix(x)?;
        Ok(&p * p.transpose())
    }

    /// Frame coefficients of the chart coordinate vectors (d × d).
    ///
    /// A chart velocity `v` corresponds to the tangent vector with frame
    /// coefficients `J v`, and to the ambient velocity `P_xᵀ J v`. Identity for
    /// every chart except the sphere, where ∂/∂θ has length sin φ.
    pub fn chart_to_frame(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let x = self.reduce(x)?;
        let d = self.intrinsic_dim();
        let mut j = DMatrix::identity(d, d);
        for (f, c, _) in self.factors() {
            match f {
                Manifold::Sphere => j[(c.start + 1, c.start + 1)] = x[c.start].sin(),
                Manifold::Product(_) => {
                    let sub = f.chart_to_frame(&x[c.clone()])?;
                    j.view_mut((c.start, c.start), (c.len(), c.len())).copy_from(&sub);
                }
                _ => {}
            }
        }
        Ok(j)
    }

    pub fn framed_point(&self, x: &[f64]) -> Result<FramedPoint> {
        let chart = self.reduce(x)?;
        Ok(FramedPoint {
            ambient: self.embed(&chart)?,
            projection: self.projection_matrix(&chart)?,
            chart,
        })
    }

    /// Geodesic distance: arc length on circles and spheres, Euclidean on ℝⁿ,
    /// root-sum-square over product factors.
    pub fn geodesic_distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(x)?;
        self.check(y)?;
        Ok(self.distance_unchecked(x, y))
    }

    fn distance_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Manifold::Circle => {
                let d = reduce_periodic(x[0] - y[0], TAU);
                d.min(TAU - d)
            }
            Manifold::Sphere => {
                let mut a = DVector::zeros(3);
                let mut b = DVector::zeros(3);
                self.embed_into(x, a.as_mut_slice());
                self.embed_into(y, b.as_mut_slice());
                // atan2 form stays accurate for nearly coincident points.
                a.cross(&b).norm().atan2(a.dot(&b))
            }
            Manifold::Euclidean(_) => x
                .iter()
                .zip(y)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt(),
            Manifold::Product(_) => self
                .factors()
                .into_iter()
                .map(|(f, c, _)| f.distance_unchecked(&x[c.clone()], &y[c]).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Draws a random chart point: uniform on compact factors, uniform in
    /// `[-3, 3]ⁿ` on Euclidean factors.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Manifold::Circle => vec![rng.random::<f64>() * TAU],
            Manifold::Sphere => {
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                vec![(1.0 - 2.0 * u).clamp(-1.0, 1.0).acos(), v * TAU]
            }
            Manifold::Euclidean(n) => (0..*n)
                .map(|_| (2.0 * rng.random::<f64>() - 1.0) * EUCLIDEAN_SAMPLE_HALF_WIDTH)
                .collect(),
            Manifold::Product(fs) => fs.iter().flat_map(|f| f.sample_point(rng)).collect(),
        }
    }

    /// Distance from an ambient vector to the embedded tangent space at `x`:
    /// `‖w − P_xᵀ P_x w‖∞` for the orthonormal shipped frame.
    pub fn normal_residual(&self, x: &[f64], ambient_vector: &DVector<f64>) -> Result<f64> {
        let p = self.projection_matrix(x)?;
        if ambient_vector.len() != p.ncols() {
            return Err(GvfError::shape(p.ncols(), ambient_vector.len()));
        }
        let tangential = p.transpose() * (&p * ambient_vector);
        Ok((ambient_vector - tangential).amax())
    }
}

impl fmt::Display for Manifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Reduces `v` into `[0, period)`.
pub fn reduce_periodic(v: f64, period: f64) -> f64 {
    let r = v.rem_euclid(period);
    // rem_euclid can round up to exactly `period` for tiny negative inputs.
    if r >= period {
        0.0
    } else {
        r
    }
}

/// Nearest-representative angle difference `b − a` in (−π, π].
pub fn wrapped_difference(a: f64, b: f64) -> f64 {
    let d = reduce_periodic(b - a, TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

type GaugeFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Pointwise invertible change of frame `x ↦ A(x)` (d × d).
///
/// Vectors transform as `v ↦ A(x) v`, projection matrices as `P_x ↦ A(x) P_x`
/// and kernels as `K ↦ A(x) K A(x')ᵀ`.
#[derive(Clone)]
pub struct GaugeField {
    dim: usize,
    map: Arc<GaugeFn>,
    /// Informational only.
    pub smooth: bool,
}

/// Smallest |det A(x)| accepted as invertible.
pub const MIN_GAUGE_DETERMINANT: f64 = 1e-8;

impl GaugeField {
    pub fn new<F>(dim: usize, smooth: bool, map: F) -> Self
    where
        F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        GaugeField {
            dim,
            map: Arc::new(map),
            smooth,
        }
    }

    pub fn identity(dim: usize) -> Self {
        GaugeField::new(dim, true, move |_| DMatrix::identity(dim, dim))
    }

    pub fn constant(matrix: DMatrix<f64>) -> Self {
        let dim = matrix.nrows();
        GaugeField::new(dim, true, move |_| matrix.clone())
    }

    /// An arbitrary, nowhere-continuous field of rotations keyed on the exact
    /// bits of the point.
    pub fn random_rotations(dim: usize, seed: u64) -> Self {
        GaugeField::new(dim, false, move |x| {
            let mut rng = seed::rng(seed::hash_point(seed, x));
            random_orthogonal(dim, &mut rng)
        })
    }

    /// Random matrices `Q₁ diag(s) Q₂` with singular values in `[1, max_condition]`.
    pub fn random_conditioned(dim: usize, max_condition: f64, seed: u64) -> Self {
        GaugeField::new(dim, false, move |x| {
            let mut rng = seed::rng(seed::hash_point(seed, x));
            random_conditioned_matrix(dim, max_condition, &mut rng)
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates `A(x)`, rejecting numerically singular matrices.
    pub fn at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let a = (self.map)(x);
        if a.nrows() != self.dim || a.ncols() != self.dim {
            return Err(GvfError::shape(
                format!("{0}x{0} gauge matrix", self.dim),
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
        let det = a.determinant();
        if !(det.abs() >= MIN_GAUGE_DETERMINANT) {
            return Err(GvfError::Gauge {
                point: x.to_vec(),
                det,
            });
        }
        Ok(a)
    }
}

impl fmt::Debug for GaugeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GaugeField")
            .field("dim", &self.dim)
            .field("smooth", &self.smooth)
            .finish_non_exhaustive()
    }
}

fn gaussian_matrix<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng))
}

/// Haar-random orthogonal matrix via QR with sign correction.
pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let qr = gaussian_matrix(dim, rng).qr();
    let (mut q, r) = qr.unpack();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn random_conditioned_matrix<R: Rng + ?Sized>(
    dim: usize,
    max_condition: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let q1 = random_orthogonal(dim, rng);
    let q2 = random_orthogonal(dim, rng);
    let s = DVector::from_fn(dim, |_, _| 1.0 + (max_condition - 1.0) * rng.random::<f64>());
    q1 * DMatrix::from_diagonal(&s) * q2
}
