use gvfield::inference::{
    exact_posterior_fit, full_batch, pathwise_posterior_sample, pathwise_posterior_sample_with_noise,
    svgp_elbo, svgp_elbo_gradient, svgp_fit, svgp_initial_state, svgp_pathwise_sample,
    svgp_pathwise_sample_with_noise, svgp_predict, SvgpConfig, SvgpState, VectorObservationSet,
};
use gvfield::projected::{ambient_covariance, ambient_pushforward, gauge_transform_kernel, sample_prior_field, FnField, MatrixKernel, ProjectedKernel, VectorField};
use gvfield::seed;
use gvfield::{EuclideanKernel, GaugeField, KernelFamily, Manifold, ScalarKernel, SpectralScalarKernel};
use nalgebra::{DMatrix, DVector};

type SphereKernel = ProjectedKernel<SpectralScalarKernel>;

fn sphere_kernel() -> SphereKernel {
    ProjectedKernel::new(SpectralScalarKernel::new(Manifold::Sphere, KernelFamily::Matern32, 0.6, 1.0, 256).unwrap())
}

fn sphere_data(kernel: &SphereKernel, n: usize, noise: f64, seed_value: u64) -> VectorObservationSet {
    let truth = sample_prior_field(kernel, 1, seed_value).unwrap();
    let mut rng = seed::rng_for(seed_value, "points");
    let points: Vec<Vec<f64>> = (0..n).map(|_| Manifold::Sphere.sample_point(&mut rng)).collect();
    let mut noise_rng = seed::rng_for(seed_value, "noise");
    let values = points
        .iter()
        .map(|x| {
            let v = truth.eval(x).unwrap();
            v.map(|c| c + noise.sqrt() * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut noise_rng))
        })
        .collect();
    VectorObservationSet::new(points, values, noise).unwrap()
}

fn test_points(n: usize, seed_value: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed_value);
    (0..n).map(|_| Manifold::Sphere.sample_point(&mut rng)).collect()
}

fn exact_state(obs: &VectorObservationSet) -> SvgpState {
    let d = obs.dim();
    let cov = DMatrix::identity(d, d) * obs.noise_variance();
    SvgpState::new(
        &Manifold::Sphere,
        obs.points().to_vec(),
        obs.stacked_values(),
        &vec![cov; obs.len()],
        obs.noise_variance(),
    )
    .unwrap()
}

/// Mean and standard error of the sample mean.
fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Largest |empirical − target| / standard error over means and covariances.
fn worst_z(draws: &[DVector<f64>], mean: &DVector<f64>, cov: &DMatrix<f64>) -> (f64, f64) {
    let k = mean.len();
    let mut mean_z: f64 = 0.0;
    for i in 0..k {
        let (m, se) = moments(&draws.iter().map(|v| v[i]).collect::<Vec<_>>());
        mean_z = mean_z.max((m - mean[i]).abs() / se);
    }
    let (emp_means, _): (Vec<f64>, Vec<f64>) = (0..k)
        .map(|i| moments(&draws.iter().map(|v| v[i]).collect::<Vec<_>>()))
        .unzip();
    let mut cov_z: f64 = 0.0;
    for i in 0..k {
        for j in i..k {
            let prods: Vec<f64> = draws
                .iter()
                .map(|v| (v[i] - emp_means[i]) * (v[j] - emp_means[j]))
                .collect();
            let (c, se) = moments(&prods);
            cov_z = cov_z.max((c - cov[(i, j)]).abs() / se.max(1e-15));
        }
    }
    (mean_z, cov_z)
}

#[test]
fn interpolates_in_the_noiseless_limit() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 6, 1e-12, 3);
    let post = exact_posterior_fit(&k, obs.clone()).unwrap();
    for (x, y) in obs.points().iter().zip(obs.values()) {
        assert!((post.mean(x).unwrap() - y).amax() < 1e-5);
    }
}

#[test]
fn single_point_closed_form() {
    let k = ProjectedKernel::new(SpectralScalarKernel::new(Manifold::Sphere, KernelFamily::Matern52, 0.5, 2.0, 256).unwrap());
    let noise = 0.5;
    let x = vec![1.2, 0.4];
    let y = DVector::from_vec(vec![0.8, -1.1]);
    let post = exact_posterior_fit(&k, VectorObservationSet::new(vec![x.clone()], vec![y.clone()], noise).unwrap()).unwrap();
    let (m, c) = post.predict(&[x]).unwrap();
    // K(x, x) = σ² I decouples the channels into scalar one-point GPs.
    let gain = 2.0 / (2.0 + noise);
    assert!((&m[0] - y * gain).amax() < 1e-12);
    assert!((&c[0] - DMatrix::identity(2, 2) * (2.0 * noise / (2.0 + noise))).amax() < 1e-12);
}

#[test]
fn variance_returns_to_prior_far_from_data() {
    let k = ProjectedKernel::new(EuclideanKernel::isotropic(2, KernelFamily::SquaredExponential, 0.5, 1.5).unwrap());
    let obs = VectorObservationSet::new(
        vec![vec![0.0, 0.0], vec![0.3, -0.2]],
        vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![-1.0, 0.5])],
        0.01,
    )
    .unwrap();
    let post = exact_posterior_fit(&k, obs).unwrap();
    let (m, c) = post.predict(&[vec![10.0, 10.0]]).unwrap();
    assert!(m[0].amax() < 1e-3);
    assert!((&c[0] - DMatrix::identity(2, 2) * 1.5).amax() < 1e-3);
}

#[test]
fn exact_guards_and_validation() {
    assert!(VectorObservationSet::new(vec![], vec![], 0.1).is_err());
    assert!(VectorObservationSet::new(vec![vec![0.0, 0.0]], vec![DVector::from_vec(vec![f64::NAN, 0.0])], 0.1).is_err());
    assert!(VectorObservationSet::new(vec![vec![0.0, 0.0]], vec![DVector::zeros(2)], 0.0).is_err());
    let k = sphere_kernel();
    let wrong = VectorObservationSet::new(vec![vec![0.5, 0.5]], vec![DVector::zeros(3)], 0.1).unwrap();
    assert!(exact_posterior_fit(&k, wrong).is_err());
}

#[test]
fn posterior_blocks_are_psd() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 12, 0.01, 4);
    let post = exact_posterior_fit(&k, obs.clone()).unwrap();
    let (_, covs) = post.predict(&test_points(100, 9)).unwrap();
    let state = exact_state(&obs);
    let (_, sparse) = svgp_predict(&state, &k, &test_points(100, 10)).unwrap();
    for c in covs.iter().chain(&sparse) {
        let e = c.clone().symmetric_eigen().eigenvalues;
        assert!(e.min() >= -1e-8 * e.max().max(1e-12));
    }
}

#[test]
fn pathwise_samples_match_exact_posterior() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 8, 0.05, 5);
    let post = exact_posterior_fit(&k, obs).unwrap();
    let xs = test_points(5, 11);
    let (means, _) = post.predict(&xs).unwrap();
    let mean = gvfield::linalg::stack(&means);
    let cov = post.joint_covariance(&xs).unwrap();
    let draws: Vec<DVector<f64>> = (0..8192u64)
        .map(|s| {
            let prior = sample_prior_field(&k, 1, seed::derive_index(77, s)).unwrap();
            let f = pathwise_posterior_sample(&post, prior, s).unwrap();
            gvfield::linalg::stack(&xs.iter().map(|x| f.eval(x).unwrap()).collect::<Vec<_>>())
        })
        .collect();
    let (mz, cz) = worst_z(&draws, &mean, &cov);
    assert!(mz <= 3.0, "mean z {mz}");
    assert!(cz <= 3.0, "cov z {cz}");
}

#[test]
fn pathwise_reproduces_prior_on_its_own_data() {
    let k = sphere_kernel();
    let prior = sample_prior_field(&k, 1, 8).unwrap();
    let points = test_points(6, 12);
    let values = points.iter().map(|x| prior.eval(x).unwrap()).collect();
    let obs = VectorObservationSet::new(points.clone(), values, 1e-12).unwrap();
    let post = exact_posterior_fit(&k, obs).unwrap();
    let f = pathwise_posterior_sample_with_noise(&post, &prior, &DVector::zeros(12)).unwrap();
    for x in &points {
        assert!((f.eval(x).unwrap() - prior.eval(x).unwrap()).amax() < 1e-6);
    }
}

#[test]
fn pathwise_is_deterministic() {
    let k = sphere_kernel();
    let post = exact_posterior_fit(&k, sphere_data(&k, 5, 0.1, 6)).unwrap();
    let a = pathwise_posterior_sample(&post, sample_prior_field(&k, 1, 1).unwrap(), 2).unwrap();
    let b = pathwise_posterior_sample(&post, sample_prior_field(&k, 1, 1).unwrap(), 2).unwrap();
    let x = [0.3, 0.9];
    assert_eq!(a.eval(&x).unwrap(), b.eval(&x).unwrap());
}

#[test]
fn svgp_with_data_as_inducing_points_is_exact() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 20, 0.05, 7);
    let post = exact_posterior_fit(&k, obs.clone()).unwrap();
    let state = exact_state(&obs);
    let xs = test_points(30, 13);
    let (em, ec) = post.predict(&xs).unwrap();
    let (sm, sc) = svgp_predict(&state, &k, &xs).unwrap();
    for i in 0..xs.len() {
        assert!((&em[i] - &sm[i]).amax() < 1e-8);
        assert!((&ec[i] - &sc[i]).amax() < 1e-8);
    }
    let lml = post.log_marginal_likelihood();
    let elbo = svgp_elbo(&state, &k, &obs, &full_batch(&obs)).unwrap();
    assert!(lml - elbo >= -1e-6, "gap {}", lml - elbo);
    assert!((lml - elbo).abs() < 1e-6, "gap {}", lml - elbo);
}

#[test]
fn elbo_bounds_log_marginal_likelihood() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 40, 0.05, 8);
    let lml = exact_posterior_fit(&k, obs.clone()).unwrap().log_marginal_likelihood();
    for m in [1, 5, 15, 40] {
        let state = svgp_initial_state(&k, &obs, m, 0).unwrap();
        let elbo = svgp_elbo(&state, &k, &obs, &full_batch(&obs)).unwrap();
        assert!(lml - elbo >= -1e-6, "m = {m}: gap {}", lml - elbo);
    }
}

#[test]
fn kl_vanishes_as_q_approaches_prior() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 6, 0.1, 9);
    let d = 2;
    let kl = |t: f64| {
        let state = SvgpState::new(
            &Manifold::Sphere,
            obs.points().to_vec(),
            DVector::zeros(12),
            &vec![DMatrix::identity(d, d) * t; 6],
            0.1,
        )
        .unwrap();
        svgp_elbo_gradient(&state, &k, &obs, &full_batch(&obs)).unwrap().kl
    };
    let (a, b) = (kl(1e2), kl(1e8));
    assert!(a > b && b >= -1e-9 && b < 1e-5, "{a} {b}");
}

#[test]
fn minibatch_halves_average_to_full_batch() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 10, 0.05, 10);
    let state = svgp_initial_state(&k, &obs, 4, 0).unwrap();
    let full = svgp_elbo(&state, &k, &obs, &full_batch(&obs)).unwrap();
    let a = svgp_elbo(&state, &k, &obs, &[0, 2, 4, 6, 8]).unwrap();
    let b = svgp_elbo(&state, &k, &obs, &[1, 3, 5, 7, 9]).unwrap();
    assert!(((a + b) / 2.0 - full).abs() < 1e-10);
    assert!(svgp_elbo(&state, &k, &obs, &[]).is_err());
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 5, 0.1, 11);
    let mut state = svgp_initial_state(&k, &obs, 3, 0).unwrap();
    // Move away from the symmetric initialization.
    for (i, v) in state.mean.iter_mut().enumerate() {
        *v += 0.1 * (i as f64).sin();
    }
    for (k_, f) in state.scale_factors.iter_mut().enumerate() {
        f[2] = 0.05 * (k_ as f64 + 1.0);
        f[3] *= 1.3;
    }
    let batch = full_batch(&obs);
    let g = svgp_elbo_gradient(&state, &k, &obs, &batch).unwrap();
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    for i in 0..state.mean.len() {
        let (mut up, mut dn) = (state.clone(), state.clone());
        up.mean[i] += h;
        dn.mean[i] -= h;
        let fd = (svgp_elbo(&up, &k, &obs, &batch).unwrap() - svgp_elbo(&dn, &k, &obs, &batch).unwrap()) / (2.0 * h);
        assert!(rel(fd, g.mean[i]) < 1e-4, "mean {i}: {fd} vs {}", g.mean[i]);
    }
    for b in 0..state.len() {
        for (idx, (r, c)) in [(0, 0), (1, 0), (1, 1)].into_iter().enumerate() {
            let flat = r * 2 + c;
            let (mut up, mut dn) = (state.clone(), state.clone());
            up.scale_factors[b][flat] += h;
            dn.scale_factors[b][flat] -= h;
            let fd = (svgp_elbo(&up, &k, &obs, &batch).unwrap() - svgp_elbo(&dn, &k, &obs, &batch).unwrap()) / (2.0 * h);
            let an = g.factors[b][(r, c)];
            assert!(rel(fd, an) < 1e-4, "factor {b} entry {idx}: {fd} vs {an}");
        }
    }
}

#[test]
fn fit_matches_exact_rmse_with_full_inducing_set() {
    let k = sphere_kernel();
    let all = sphere_data(&k, 40, 0.01, 12);
    let train = all.subset(&(0..30).collect::<Vec<_>>()).unwrap();
    let held: Vec<usize> = (30..40).collect();
    let config = SvgpConfig {
        inducing_count: 30,
        steps: 300,
        learning_rate: 1e-2,
        batch_size: None,
        learn_lengthscale: false,
        seed: 1,
    };
    let fit = svgp_fit(&k, &train, &config).unwrap();
    assert!(fit.best_elbo >= fit.initial_elbo);
    let exact = exact_posterior_fit(&k, train.clone()).unwrap();
    let rmse = |pred: &[DVector<f64>]| {
        let se: f64 = held
            .iter()
            .zip(pred)
            .map(|(&i, p)| (p - &all.values()[i]).norm_squared())
            .sum();
        (se / held.len() as f64).sqrt()
    };
    let xs: Vec<Vec<f64>> = held.iter().map(|&i| all.points()[i].clone()).collect();
    let (em, _) = exact.predict(&xs).unwrap();
    let (sm, _) = svgp_predict(&fit.state, &fit.kernel, &xs).unwrap();
    let (re, rs) = (rmse(&em), rmse(&sm));
    assert!(rs <= 1.1 * re, "sparse {rs} vs exact {re}");
}

#[test]
fn zero_steps_return_initialization() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 10, 0.05, 13);
    let config = SvgpConfig {
        inducing_count: 4,
        steps: 0,
        seed: 3,
        ..SvgpConfig::default()
    };
    let fit = svgp_fit(&k, &obs, &config).unwrap();
    assert_eq!(fit.state, svgp_initial_state(&k, &obs, 4, 3).unwrap());
    assert_eq!(fit.best_elbo, fit.initial_elbo);
}

#[test]
fn fit_with_minibatches_and_lengthscale_improves() {
    let k = ProjectedKernel::new(SpectralScalarKernel::new(Manifold::Sphere, KernelFamily::Matern32, 1.5, 1.0, 256).unwrap());
    let obs = sphere_data(&sphere_kernel(), 30, 0.05, 14);
    let config = SvgpConfig {
        inducing_count: 10,
        steps: 60,
        learning_rate: 2e-2,
        batch_size: Some(10),
        learn_lengthscale: true,
        seed: 4,
    };
    let fit = svgp_fit(&k, &obs, &config).unwrap();
    assert!(fit.best_elbo > fit.initial_elbo);
    assert_eq!(fit.trace.len(), 60);
    assert_eq!(fit.state.lengthscales, fit.kernel.scalar().lengthscales());
}

#[test]
fn state_round_trips_through_json() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 8, 0.05, 15);
    let state = svgp_initial_state(&k, &obs, 5, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    state.save(&path).unwrap();
    let back = SvgpState::load(&path).unwrap();
    assert_eq!(back, state);
    assert!(SvgpState::from_json("{\"manifold\": 3}").is_err());
}

#[test]
fn far_inducing_point_reverts_to_prior() {
    let k = ProjectedKernel::new(EuclideanKernel::isotropic(2, KernelFamily::Matern32, 0.3, 1.0).unwrap());
    let state = SvgpState::new(
        &Manifold::Euclidean(2),
        vec![vec![50.0, 50.0]],
        DVector::from_vec(vec![3.0, -2.0]),
        &[DMatrix::identity(2, 2) * 0.1],
        0.1,
    )
    .unwrap();
    let (m, c) = svgp_predict(&state, &k, &[vec![0.0, 0.0]]).unwrap();
    assert!(m[0].amax() < 1e-12);
    assert!((&c[0] - DMatrix::identity(2, 2)).amax() < 1e-12);
}

#[test]
fn sparse_predictions_are_gauge_independent() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 15, 0.05, 16);
    let state = svgp_initial_state(&k, &obs, 6, 0).unwrap();
    let gauge = GaugeField::random_conditioned(2, 10.0, 99);
    let gk = gauge_transform_kernel(&k, gauge.clone()).unwrap();
    let gstate = state.gauge_transformed(&gauge).unwrap();
    let xs = test_points(25, 17);
    let (m, c) = svgp_predict(&state, &k, &xs).unwrap();
    let (gm, gc) = svgp_predict(&gstate, &gk, &xs).unwrap();
    for (i, x) in xs.iter().enumerate() {
        let push = ambient_pushforward(&k, x, &m[i]).unwrap();
        let gpush = ambient_pushforward(&gk, x, &gm[i]).unwrap();
        assert!((push - gpush).amax() < 1e-9);
        let cov = ambient_covariance(&k, x, &c[i]).unwrap();
        let gcov = ambient_covariance(&gk, x, &gc[i]).unwrap();
        assert!((cov - gcov).amax() < 1e-9);
    }
    // The data term of the ELBO is frame-independent too.
    let gobs = obs.gauge_transformed(&gauge).unwrap();
    let a = svgp_elbo(&state, &k, &obs, &full_batch(&obs)).unwrap();
    let b = svgp_elbo(&gstate, &gk, &gobs, &full_batch(&gobs)).unwrap();
    let rot = GaugeField::random_rotations(2, 5);
    let c_ = svgp_elbo(
        &state.gauge_transformed(&rot).unwrap(),
        &gauge_transform_kernel(&k, rot.clone()).unwrap(),
        &obs.gauge_transformed(&rot).unwrap(),
        &full_batch(&obs),
    )
    .unwrap();
    assert!((a - c_).abs() < 1e-8, "{a} vs {c_}");
    assert!(b.is_finite());
}

#[test]
fn sparse_pathwise_matches_sparse_prediction() {
    let k = sphere_kernel();
    let obs = sphere_data(&k, 12, 0.05, 18);
    let mut state = svgp_initial_state(&k, &obs, 5, 0).unwrap();
    for (i, f) in state.scale_factors.iter_mut().enumerate() {
        f[2] = 0.03 * i as f64;
    }
    let xs = test_points(4, 19);
    let (means, _) = svgp_predict(&state, &k, &xs).unwrap();
    let mean = gvfield::linalg::stack(&means);
    // Joint predictive covariance K_xx − K_xz B⁻¹ K_zx.
    let kxz = k.cross_gram(&xs, &state.inducing).unwrap();
    let kzz = k.gram(&state.inducing).unwrap();
    let b = kzz + gvfield::linalg::block_diagonal(&state.covariance_blocks());
    let cov = k.gram(&xs).unwrap() - &kxz * b.cholesky().unwrap().solve(&kxz.transpose());
    let draws: Vec<DVector<f64>> = (0..8192u64)
        .map(|s| {
            let prior = sample_prior_field(&k, 1, seed::derive_index(123, s)).unwrap();
            let f = svgp_pathwise_sample(&state, &k, prior, s).unwrap();
            gvfield::linalg::stack(&xs.iter().map(|x| f.eval(x).unwrap()).collect::<Vec<_>>())
        })
        .collect();
    let (mz, cz) = worst_z(&draws, &mean, &cov);
    assert!(mz <= 3.0, "mean z {mz}");
    assert!(cz <= 3.0, "cov z {cz}");
}

#[test]
fn sparse_pathwise_with_zero_covariance_hits_prior() {
    let k = sphere_kernel();
    let prior = sample_prior_field(&k, 1, 20).unwrap();
    let z = test_points(5, 21);
    let mu = gvfield::linalg::stack(&z.iter().map(|x| prior.eval(x).unwrap()).collect::<Vec<_>>());
    let state = SvgpState::new(&Manifold::Sphere, z.clone(), mu, &vec![DMatrix::zeros(2, 2); 5], 0.1).unwrap();
    let f = svgp_pathwise_sample_with_noise(&state, &k, &prior, &DVector::zeros(10)).unwrap();
    for x in &z {
        assert!((f.eval(x).unwrap() - prior.eval(x).unwrap()).amax() < 1e-10);
    }
    let zero = FnField::new(Manifold::Sphere, |_: &[f64]| DVector::zeros(2));
    let a = svgp_pathwise_sample(&state, &k, &zero, 1).unwrap();
    let b = svgp_pathwise_sample(&state, &k, &zero, 1).unwrap();
    assert_eq!(a.eval(&[1.0, 1.0]).unwrap(), b.eval(&[1.0, 1.0]).unwrap());
}
