//! Gaussian vector fields on embedded Riemannian manifolds.
//!
//! Matrix-valued kernels are built by projection, `K_F(x, x') = P_x κ(x, x') P_{x'}ᵀ`,
//! from scalar manifold kernels and an isometric embedding. Everything the
//! library computes is expressed in a frame `F`, and every output that has a
//! geometric meaning transforms equivariantly under a change of frame.

pub mod checks;
pub mod dynamics;
pub mod error;
pub mod harmonics;
pub mod inference;
pub mod linalg;
pub mod manifold;
pub mod seed;
pub mod projected;
pub mod spectral;
pub mod wind;

pub use error::{GvfError, Result};
pub use inference::{ExactPosterior, SvgpConfig, SvgpState, VectorObservationSet};
pub use manifold::{FramedPoint, GaugeField, Manifold};
pub use projected::{GaussianVectorFieldSample, MatrixKernel, ProjectedKernel, VectorField};
pub use spectral::{
    AnyScalarKernel, EigenPair, EuclideanKernel, FeatureMap, KernelFamily, ProductKernel,
    ScalarKernel, SpectralScalarKernel,
};
