use std::f64::consts::{FRAC_PI_2, PI};

use gvfield::projected::{
    gauge_independence_report, gauge_transform_kernel, sample_prior_field, MatrixKernel, ProjectedKernel,
    VectorField,
};
use gvfield::seed;
use gvfield::{AnyScalarKernel, GaugeField, KernelFamily, Manifold, ScalarKernel, SpectralScalarKernel};
use nalgebra::{DMatrix, DVector};

fn sphere_kernel(truncation: usize) -> ProjectedKernel<SpectralScalarKernel> {
    ProjectedKernel::new(
        SpectralScalarKernel::new(Manifold::Sphere, KernelFamily::Matern32, 0.6, 1.0, truncation).unwrap(),
    )
}

fn shipped() -> Vec<ProjectedKernel<AnyScalarKernel>> {
    let build = |m: Manifold, f: KernelFamily, ls: &[f64]| {
        ProjectedKernel::new(AnyScalarKernel::build(&m, f, ls, 1.0, None).unwrap())
    };
    vec![
        build(Manifold::Circle, KernelFamily::SquaredExponential, &[0.3]),
        build(Manifold::Sphere, KernelFamily::Matern32, &[0.4]),
        build(Manifold::torus(), KernelFamily::Matern52, &[0.8]),
        build(Manifold::cylinder(), KernelFamily::SquaredExponential, &[0.3, 1.2]),
        build(Manifold::Euclidean(2), KernelFamily::Matern12, &[0.7]),
    ]
}

#[test]
fn cylinder_blocks_match_hand_assembled_product() {
    let k = ProjectedKernel::new(
        AnyScalarKernel::build(&Manifold::cylinder(), KernelFamily::SquaredExponential, &[0.5, 1.0], 1.0, None)
            .unwrap(),
    );
    let (x, y) = ([0.0, 0.0], [FRAC_PI_2, 0.0]);
    // P(0) = [[0, 1, 0], [0, 0, 1]], P(π/2) = [[-1, 0, 0], [0, 0, 1]].
    let px = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let py = DMatrix::from_row_slice(2, 3, &[-1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let s = k.scalar().eval(&x, &y).unwrap();
    let expected = px * py.transpose() * s;
    let got = k.eval(&x, &y).unwrap();
    assert!((got.clone() - expected).amax() < 1e-15);
    assert!(got[(0, 0)].abs() < 1e-15);
    assert!((got[(1, 1)] - s).abs() < 1e-15);
}

#[test]
fn blocks_are_symmetric_under_swap() {
    let mut rng = seed::rng(1);
    for k in shipped() {
        for _ in 0..20 {
            let x = k.manifold().sample_point(&mut rng);
            let y = k.manifold().sample_point(&mut rng);
            let a = k.eval(&x, &y).unwrap();
            let b = k.eval(&y, &x).unwrap();
            assert!((a - b.transpose()).amax() < 1e-12);
        }
    }
}

#[test]
fn block_grams_are_psd() {
    let mut rng = seed::rng(2);
    for k in shipped() {
        for size in [5, 12, 20] {
            let xs: Vec<Vec<f64>> = (0..size).map(|_| k.manifold().sample_point(&mut rng)).collect();
            let g = k.gram(&xs).unwrap();
            let e = g.symmetric_eigen().eigenvalues;
            assert!(e.min() >= -1e-8 * e.max(), "{}: {}", k.manifold(), e.min());
        }
    }
}

#[test]
fn cross_gram_matches_pointwise_blocks() {
    let k = &shipped()[3];
    let mut rng = seed::rng(3);
    let xs: Vec<Vec<f64>> = (0..4).map(|_| k.manifold().sample_point(&mut rng)).collect();
    let ys: Vec<Vec<f64>> = (0..3).map(|_| k.manifold().sample_point(&mut rng)).collect();
    let g = k.cross_gram(&xs, &ys).unwrap();
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            let block = g.view((2 * i, 2 * j), (2, 2)).into_owned();
            assert!((block - k.eval(x, y).unwrap()).amax() < 1e-14);
        }
    }
}

#[test]
fn rotation_gauge_equivariance() {
    let k = sphere_kernel(256);
    let gauge = GaugeField::new(2, true, |x: &[f64]| {
        let a = 0.7 * x[0] + 1.3 * x[1].sin();
        let (s, c) = a.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
    });
    let transformed = gauge_transform_kernel(&k, gauge.clone()).unwrap();
    let mut rng = seed::rng(4);
    for _ in 0..100 {
        let x = Manifold::Sphere.sample_point(&mut rng);
        let y = Manifold::Sphere.sample_point(&mut rng);
        let lhs = transformed.eval(&x, &y).unwrap();
        let rhs = gauge.at(&x).unwrap() * k.eval(&x, &y).unwrap() * gauge.at(&y).unwrap().transpose();
        assert!((lhs - rhs).amax() < 1e-10);
    }
}

#[test]
fn singular_gauge_names_the_point() {
    let k = sphere_kernel(16);
    let gauge = GaugeField::constant(DMatrix::zeros(2, 2));
    let transformed = gauge_transform_kernel(&k, gauge).unwrap();
    let err = transformed.eval(&[1.0, 2.0], &[0.5, 0.5]).unwrap_err();
    assert!(matches!(err, gvfield::GvfError::Gauge { .. }), "{err}");
}

#[test]
fn report_is_tiny_for_shipped_kernels() {
    for k in shipped() {
        let dev = gauge_independence_report(&k, 10, 10, 7).unwrap();
        assert!(dev <= 1e-10, "{}: {dev}", k.manifold());
    }
}

/// Projects the second argument with the frame at a fixed base point rather
/// than its own frame.
struct OneSided(ProjectedKernel<SpectralScalarKernel>);

impl MatrixKernel for OneSided {
    fn manifold(&self) -> &Manifold {
        self.0.manifold()
    }
    fn frame(&self, x: &[f64]) -> gvfield::Result<DMatrix<f64>> {
        self.0.frame(x)
    }
    fn ambient(&self, x: &[f64], y: &[f64]) -> gvfield::Result<DMatrix<f64>> {
        self.0.ambient(x, y)
    }
    fn eval(&self, x: &[f64], y: &[f64]) -> gvfield::Result<DMatrix<f64>> {
        Ok(self.frame(x)? * self.ambient(x, y)? * self.frame(&[1.0, 0.0])?.transpose())
    }
}

#[test]
fn report_flags_one_sided_kernel() {
    let dev = gauge_independence_report(&OneSided(sphere_kernel(64)), 10, 10, 7).unwrap();
    assert!(dev > 1e-2, "{dev}");
}

#[test]
fn prior_sample_covariance_matches_kernel() {
    let k = sphere_kernel(121);
    let x = [1.1, 2.5];
    let n = 4096;
    let draws: Vec<DVector<f64>> = (0..n as u64)
        .map(|s| sample_prior_field(&k, 1, s).unwrap().eval(&x).unwrap())
        .collect();
    let target = k.eval(&x, &x).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let prods: Vec<f64> = draws.iter().map(|v| v[i] * v[j]).collect();
            let mean = prods.iter().sum::<f64>() / n as f64;
            let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - target[(i, j)]).abs() <= 3.0 * se, "({i},{j}) {mean} vs {}", target[(i, j)]);
        }
    }
}

#[test]
fn pushforward_covariance_matches_ambient_blocks() {
    let k = sphere_kernel(121);
    let points = [[0.4, 0.3], [1.5, 2.0], [2.6, 5.1]];
    let n = 4096;
    let frames: Vec<DMatrix<f64>> = points.iter().map(|p| k.frame(p).unwrap()).collect();
    let draws: Vec<DVector<f64>> = (0..n as u64)
        .map(|s| {
            let f = sample_prior_field(&k, 1, 100_000 + s).unwrap();
            let mut v = DVector::zeros(9);
            for (a, p) in points.iter().enumerate() {
                let amb = frames[a].transpose() * f.eval(p).unwrap();
                v.rows_mut(3 * a, 3).copy_from(&amb);
            }
            v
        })
        .collect();
    let mut worst_z: f64 = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let target = frames[a].transpose() * k.eval(&points[a], &points[b]).unwrap() * &frames[b];
            for i in 0..3 {
                for j in 0..3 {
                    let prods: Vec<f64> = draws.iter().map(|v| v[3 * a + i] * v[3 * b + j]).collect();
                    let mean = prods.iter().sum::<f64>() / n as f64;
                    let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    let se = (var / n as f64).sqrt().max(1e-12);
                    worst_z = worst_z.max((mean - target[(i, j)]).abs() / se);
                }
            }
        }
    }
    // 81 entries: allow the Bonferroni-style 4σ envelope.
    assert!(worst_z <= 4.0, "worst z-score {worst_z}");
}

#[test]
fn sampled_vectors_are_tangent() {
    let k = sphere_kernel(256);
    let f = sample_prior_field(&k, 1, 42).unwrap();
    let mut rng = seed::rng(5);
    for _ in 0..200 {
        let x = Manifold::Sphere.sample_point(&mut rng);
        let amb = k.frame(&x).unwrap().transpose() * f.eval(&x).unwrap();
        assert!(Manifold::Sphere.normal_residual(&x, &amb).unwrap() <= 1e-12);
    }
    let pole = f.eval(&[PI, 0.0]).unwrap();
    assert!(pole.iter().all(|v| v.is_finite()));
}

#[test]
fn cylinder_prior_uses_rff_part() {
    let k = ProjectedKernel::new(
        AnyScalarKernel::build(&Manifold::cylinder(), KernelFamily::SquaredExponential, &[0.3, 1.2], 1.0, None)
            .unwrap(),
    );
    let a = sample_prior_field(&k, 128, 3).unwrap();
    let b = sample_prior_field(&k, 128, 3).unwrap();
    for x in [[0.5, -1.0], [3.0, 2.0]] {
        assert_eq!(a.eval(&x).unwrap(), b.eval(&x).unwrap());
    }
    let c = sample_prior_field(&k, 128, 4).unwrap();
    assert_ne!(a.eval(&[0.5, -1.0]).unwrap(), c.eval(&[0.5, -1.0]).unwrap());
}
