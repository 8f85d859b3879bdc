use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use gvfield::dynamics::{self, PendulumParams, PendulumSetup};
use gvfield::inference::{svgp_fit, svgp_mean_field};
use gvfield::projected::sample_prior_field;
use gvfield::wind::{self, TrackObservation, WindModelConfig, WindPosterior};
use gvfield::{checks, seed};
use gvfield::{AnyScalarKernel, KernelFamily, Manifold, MatrixKernel, ProjectedKernel, ScalarKernel, SvgpConfig, SvgpState, VectorField, VectorObservationSet};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::Failure;

const SEAM_DELTA: f64 = 1e-3;

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(cfg.string("out", "out"));
    fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    // serde_json maps are ordered by key, so manifests are byte-stable.
    let value = serde_json::to_value(value).map_err(|e| Failure::Numeric(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| Failure::Numeric(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_failure(path, e))?;
    w.write_record(header).map_err(|e| io_failure(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(f64::to_string)).map_err(|e| io_failure(path, e))?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_failure(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| io_failure(path, e))?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn periodic(n: usize) -> Vec<f64> {
    (0..n).map(|i| TAU * i as f64 / n as f64).collect()
}

fn cartesian(a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| vec![x, y])).collect()
}

/// Plot grid in chart coordinates for `sample-prior`.
fn sample_grid(manifold: &Manifold) -> Result<Vec<Vec<f64>>, Failure> {
    Ok(match manifold {
        Manifold::Circle => periodic(128).into_iter().map(|t| vec![t]).collect(),
        Manifold::Sphere => {
            let lons = wind::standard_lons();
            wind::standard_lats()
                .iter()
                .flat_map(|&lat| lons.iter().map(move |&lon| wind::chart_point(lat, lon)))
                .collect()
        }
        Manifold::Euclidean(1) => linspace(-3.0, 3.0, 101).into_iter().map(|t| vec![t]).collect(),
        Manifold::Euclidean(2) => cartesian(&linspace(-3.0, 3.0, 41), &linspace(-3.0, 3.0, 41)),
        m if *m == Manifold::torus() => cartesian(&periodic(32), &periodic(32)),
        m if *m == Manifold::cylinder() => cartesian(&periodic(64), &linspace(-3.0, 3.0, 25)),
        m => return Err(Failure::Validation(format!("no sampling grid for manifold '{}'", m.name()))),
    })
}

pub fn sample_prior(cfg: &RunConfig) -> Result<(), Failure> {
    let seed_value = cfg.u64("seed", 0)?;
    let manifold = Manifold::from_name(&cfg.string("manifold", "sphere"))?;
    let family = KernelFamily::from_name(&cfg.string("kernel", "matern32"))?;
    let lengthscales = cfg.f64_list("lengthscale", &[0.5])?;
    let amplitude = cfg.f64("amplitude", 1.0)?;
    let truncation = cfg.optional_usize("truncation")?;
    let features = cfg.usize("features", 1024)?;
    let grid = sample_grid(&manifold)?;
    let dir = out_dir(cfg)?;

    let kernel = ProjectedKernel::new(AnyScalarKernel::build(&manifold, family, &lengthscales, amplitude, truncation)?);
    let sample = sample_prior_field(&kernel, features, seed::derive(seed_value, "sample-prior"))?;
    let rows = grid
        .iter()
        .map(|x| {
            let c = sample.eval(x)?;
            Ok(x.iter().copied().chain(c.iter().copied()).collect())
        })
        .collect::<gvfield::Result<Vec<Vec<f64>>>>()?;
    let header: Vec<String> = (0..manifold.intrinsic_dim())
        .map(|i| format!("x{i}"))
        .chain((0..manifold.intrinsic_dim()).map(|i| format!("c{i}")))
        .collect();
    let csv_path = dir.join("sample.csv");
    write_rows(&csv_path, &header, &rows)?;
    info!("wrote {} rows to {}", rows.len(), csv_path.display());

    write_json(
        &dir.join("manifest.json"),
        &json!({
            "command": "sample-prior",
            "seed": seed_value,
            "manifold": manifold.name(),
            "kernel": family.name(),
            "lengthscales": kernel.scalar().lengthscales(),
            "variance": kernel.scalar().variance(),
            "truncation": truncation,
            "features": features,
            "rows": rows.len(),
            "files": [file_name(&csv_path)],
        }),
    )
}

fn pendulum_setup(cfg: &RunConfig) -> Result<PendulumSetup, Failure> {
    let base = PendulumSetup::default();
    let defaults = base.params;
    let ls = cfg.f64_list("lengthscale", &[base.lengthscales.0, base.lengthscales.1])?;
    let lengthscales = match ls.as_slice() {
        [l] => (*l, *l),
        [a, b] => (*a, *b),
        _ => return Err(Failure::Validation("pendulum takes one or two lengthscales".into())),
    };
    let setup = PendulumSetup {
        params: PendulumParams {
            mass: cfg.f64("mass", defaults.mass)?,
            length: cfg.f64("length", defaults.length)?,
            gravity: cfg.f64("gravity", defaults.gravity)?,
            friction: cfg.f64("friction", defaults.friction)?,
            step: cfg.f64("step_size", defaults.step)?,
        },
        steps: cfg.usize("steps", base.steps)?,
        lengthscales,
        amplitude: cfg.f64("amplitude", base.amplitude)?,
        noise_variance: cfg.f64("noise", base.noise_variance)?,
        truncation: cfg.usize("truncation", base.truncation)?,
        ..base
    };
    setup.validate()?;
    Ok(setup)
}

fn pendulum_kernel(setup: &PendulumSetup, family: KernelFamily, manifold: &Manifold) -> gvfield::Result<ProjectedKernel<AnyScalarKernel>> {
    let (lq, lp) = setup.lengthscales;
    Ok(ProjectedKernel::new(AnyScalarKernel::build(
        manifold,
        family,
        &[lq, lp],
        setup.amplitude,
        Some(setup.truncation),
    )?))
}

/// Either the sparse state that reproduces the exact posterior or, with
/// `inducing > 0`, an ELBO-fitted one.
fn pendulum_model(
    cfg: &RunConfig,
    kernel: ProjectedKernel<AnyScalarKernel>,
    obs: &VectorObservationSet,
    seed_value: u64,
) -> Result<(SvgpState, ProjectedKernel<AnyScalarKernel>, Value), Failure> {
    let inducing = cfg.usize("inducing", 0)?;
    if inducing == 0 {
        let state = dynamics::exact_sparse_state(kernel.manifold(), obs)?;
        return Ok((state, kernel, json!({"kind": "exact"})));
    }
    let config = SvgpConfig {
        inducing_count: inducing,
        steps: cfg.usize("svgp_steps", 500)?,
        learning_rate: cfg.f64("learning_rate", 1e-2)?,
        batch_size: cfg.optional_usize("batch_size")?,
        learn_lengthscale: cfg.bool("learn_lengthscale", false)?,
        seed: seed_value,
    };
    let fit = svgp_fit(&kernel, obs, &config)?;
    let summary = json!({
        "kind": "svgp",
        "inducing": inducing,
        "steps": config.steps,
        "initial_elbo": fit.initial_elbo,
        "best_elbo": fit.best_elbo,
        "lengthscales": fit.kernel.scalar().lengthscales(),
    });
    Ok((fit.state, fit.kernel, summary))
}

fn field_rows(field: &dyn VectorField, points: &[Vec<f64>]) -> gvfield::Result<Vec<Vec<f64>>> {
    points
        .iter()
        .map(|x| {
            let v = field.eval(x)?;
            Ok(vec![x[0], x[1], v[0], v[1]])
        })
        .collect()
}

pub fn pendulum(cfg: &RunConfig) -> Result<(), Failure> {
    let seed_value = cfg.u64("seed", 0)?;
    let manifold_name = cfg.string("manifold", "cylinder");
    if manifold_name != "cylinder" {
        return Err(Failure::Validation(format!("the pendulum lives on the cylinder, not '{manifold_name}'")));
    }
    let family = KernelFamily::from_name(&cfg.string("kernel", "se"))?;
    let setup = pendulum_setup(cfg)?;
    let rollout_count = cfg.usize("rollouts", 4)?;
    let rollout_steps = cfg.usize("rollout_steps", 500)?;
    let features = cfg.usize("features", 256)?;
    if rollout_steps == 0 {
        return Err(Failure::Validation("rollout_steps must be positive".into()));
    }
    let dir = out_dir(cfg)?;
    let mut files = Vec::new();

    let (truth, obs) = dynamics::pendulum_dataset(&setup)?;
    for (k, t) in truth.iter().enumerate() {
        let path = dir.join(format!("truth_{k}.csv"));
        t.write_csv(&path)?;
        files.push(file_name(&path));
    }
    let obs_rows: Vec<Vec<f64>> = obs
        .points()
        .iter()
        .zip(obs.values())
        .map(|(x, v)| vec![x[0], x[1], v[0], v[1]])
        .collect();
    let header = ["q", "p", "dq", "dp"].map(String::from);
    let path = dir.join("observations.csv");
    write_rows(&path, &header, &obs_rows)?;
    files.push(file_name(&path));

    let cylinder = Manifold::cylinder();
    let (m_state, m_kernel, m_summary) = pendulum_model(
        cfg,
        pendulum_kernel(&setup, family, &cylinder)?,
        &obs,
        seed::derive(seed_value, "svgp-manifold"),
    )?;
    let (e_state, e_kernel, e_summary) = pendulum_model(
        cfg,
        pendulum_kernel(&setup, family, &Manifold::Euclidean(2))?,
        &obs,
        seed::derive(seed_value, "svgp-euclidean"),
    )?;
    let m_field = svgp_mean_field(&m_state, &m_kernel)?;
    let e_field = svgp_mean_field(&e_state, &e_kernel)?;

    let grid = cartesian(&periodic(64), &linspace(-6.0, 6.0, 25));
    for (name, state, field) in [
        ("manifold", &m_state, &m_field as &dyn VectorField),
        ("euclidean", &e_state, &e_field as &dyn VectorField),
    ] {
        let path = dir.join(format!("state_{name}.json"));
        state.save(&path)?;
        files.push(file_name(&path));
        let path = dir.join(format!("mean_field_{name}.csv"));
        write_rows(&path, &header, &field_rows(field, &grid)?)?;
        files.push(file_name(&path));
    }

    let momenta = dynamics::seam_momenta();
    let seam_manifold = dynamics::seam_difference(&m_field, SEAM_DELTA, &momenta)?;
    let seam_euclidean = dynamics::seam_difference(&e_field, SEAM_DELTA, &momenta)?;
    info!("seam gap: manifold {seam_manifold:.4e}, euclidean {seam_euclidean:.4e}");

    let start = setup.starts[0];
    let h = setup.params.step;
    let mut mean_rollouts = serde_json::Map::new();
    for (name, field) in [("manifold", &m_field as &dyn VectorField), ("euclidean", &e_field as &dyn VectorField)] {
        let outcome = match dynamics::gp_rollout(field, start.0, start.1, rollout_steps, h) {
            Ok(t) => {
                let path = dir.join(format!("mean_rollout_{name}.csv"));
                t.write_csv(&path)?;
                files.push(file_name(&path));
                json!({"steps": t.len()})
            }
            // A flat model can blow up across the seam; that is a result, not an error.
            Err(gvfield::GvfError::Divergence { step }) => json!({"diverged_at": step}),
            Err(e) => return Err(e.into()),
        };
        mean_rollouts.insert(name.to_string(), outcome);
    }

    let rollouts = dynamics::posterior_rollouts(
        &m_state,
        &m_kernel,
        features,
        start,
        rollout_steps,
        h,
        rollout_count,
        seed::derive(seed_value, "rollouts"),
    )?;
    let rollout_dir = dir.join("rollouts");
    fs::create_dir_all(&rollout_dir).map_err(|e| io_failure(&rollout_dir, e))?;
    for (i, t) in rollouts.iter().enumerate() {
        let path = rollout_dir.join(format!("rollout_{i}.csv"));
        t.write_csv(&path)?;
        files.push(format!("rollouts/{}", file_name(&path)));
    }

    write_json(
        &dir.join("manifest.json"),
        &json!({
            "command": "pendulum",
            "seed": seed_value,
            "kernel": family.name(),
            "setup": setup,
            "models": {"manifold": m_summary, "euclidean": e_summary},
            "observations": obs.len(),
            "seam": {
                "delta": SEAM_DELTA,
                "manifold": seam_manifold,
                "euclidean": seam_euclidean,
            },
            "mean_rollouts": mean_rollouts,
            "posterior_rollouts": {
                "count": rollout_count,
                "steps": rollout_steps,
                "features": features,
                "start": [start.0, start.1],
            },
            "files": files,
        }),
    )
}

fn wind_config(cfg: &RunConfig) -> Result<WindModelConfig, Failure> {
    let kernel = cfg.string("kernel", "matern32");
    if KernelFamily::from_name(&kernel)? != KernelFamily::Matern32 {
        return Err(Failure::Validation(format!("wind models are Matern-3/2, not '{kernel}'")));
    }
    let manifold = cfg.string("manifold", "sphere");
    if manifold != "sphere" {
        return Err(Failure::Validation(format!("wind lives on the sphere, not '{manifold}'")));
    }
    let base = WindModelConfig::default();
    let lengthscale = match cfg.f64_list("lengthscale", &[base.lengthscale])?.as_slice() {
        [l] => *l,
        _ => return Err(Failure::Validation("wind takes a single lengthscale".into())),
    };
    Ok(WindModelConfig {
        lengthscale,
        manifold_amplitude: cfg.f64("amplitude", base.manifold_amplitude)?,
        baseline_amplitude: cfg.f64("baseline_amplitude", base.baseline_amplitude)?,
        amplitude_is_std: cfg.bool("amplitude_is_std", base.amplitude_is_std)?,
        learn_lengthscale: cfg.bool("learn_lengthscale", base.learn_lengthscale)?,
        truncation: cfg.optional_usize("truncation")?,
    })
}

pub fn wind(cfg: &RunConfig) -> Result<(), Failure> {
    let model = wind_config(cfg)?;
    if cfg.bool("synthetic", false)? {
        wind_synthetic(cfg, &model)
    } else {
        wind_from_files(cfg, &model)
    }
}

fn wind_synthetic(cfg: &RunConfig, model: &WindModelConfig) -> Result<(), Failure> {
    let base_seed = cfg.u64("seed", 0)?;
    let count = cfg.usize("seeds", 1)?;
    let minutes = cfg.usize("minutes", 60)?;
    if count == 0 {
        return Err(Failure::Validation("seeds must be positive".into()));
    }
    let dir = out_dir(cfg)?;
    for i in 0..count as u64 {
        let s = base_seed + i;
        let run = wind::run_synthetic(s, model, minutes)?;
        let sub = dir.join(format!("seed_{s}"));
        fs::create_dir_all(&sub).map_err(|e| io_failure(&sub, e))?;
        run.truth.grid.write_csv(&sub.join("truth.csv"))?;
        write_records(&sub.join("observations.csv"), &run.observations)?;
        wind::write_predictions(&sub.join("predictions_manifold.csv"), &run.manifold)?;
        wind::write_predictions(&sub.join("predictions_baseline.csv"), &run.baseline)?;
        info!(
            "seed {s}: rmse manifold {:.3} baseline {:.3}",
            run.metrics.manifold_rmse, run.metrics.baseline_rmse
        );
        write_json(
            &sub.join("manifest.json"),
            &json!({
                "command": "wind",
                "mode": "synthetic",
                "seed": s,
                "minutes": minutes,
                "noise_std": wind::DEFAULT_NOISE_STD,
                "track_start": run.start,
                "hyperparameters": model,
                "metrics": run.metrics,
                "files": ["truth.csv", "observations.csv", "predictions_manifold.csv", "predictions_baseline.csv"],
            }),
        )?;
    }
    Ok(())
}

fn required_path(cfg: &RunConfig, key: &str) -> Result<PathBuf, Failure> {
    cfg.path(key)
        .ok_or_else(|| Failure::Validation(format!("'{key}' is required unless --synthetic is given")))
}

fn model_metrics(p: &WindPosterior, preds: &[wind::GridPrediction], grid: &wind::WindGrid, track: &[(f64, f64)]) -> Result<Value, Failure> {
    Ok(json!({
        "rmse_vs_grid": wind::rmse(preds, grid)?,
        "seam": p.seam_discontinuity(&grid.lats)?,
        "track_std_cv": p.std_cv(track)?,
        "pole_ratio": p.pole_ratio(track)?,
        "lengthscale": p.lengthscale(),
    }))
}

fn wind_from_files(cfg: &RunConfig, model: &WindModelConfig) -> Result<(), Failure> {
    let grid_path = required_path(cfg, "grid")?;
    let track_path = required_path(cfg, "track")?;
    let noise_std = cfg.f64("noise_std", wind::DEFAULT_NOISE_STD)?;
    let grid = wind::load_wind_grid(&grid_path)?;
    let climatology = cfg.path("climatology").map(|p| wind::load_wind_grid(&p)).transpose()?;
    let rows = wind::load_track(&track_path)?;
    if rows.is_empty() {
        return Err(Failure::Validation(format!("{}: empty track", track_path.display())));
    }
    let track: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2)).collect();

    let observations: Vec<TrackObservation> = if rows.iter().all(|r| r.3.is_none()) {
        wind::track_observations(&grid, climatology.as_ref(), &track, noise_std)?
    } else if rows.iter().all(|r| r.3.is_some()) {
        if !(noise_std > 0.0) {
            return Err(Failure::Validation("noise_std must be positive".into()));
        }
        let observed: Vec<(f64, f64)> = rows.iter().map(|r| r.3.unwrap()).collect();
        let anomaly = match &climatology {
            Some(c) => wind::climatology_anomaly(&observed, &wind::interpolate_grid(c, &track)?)?,
            None => observed,
        };
        rows.iter()
            .zip(anomaly)
            .map(|(r, (u, v))| TrackObservation {
                time: r.0,
                lat: r.1,
                lon: r.2,
                u,
                v,
                noise_std,
            })
            .collect()
    } else {
        return Err(Failure::Validation("track rows must all carry winds or none".into()));
    };

    let dir = out_dir(cfg)?;
    let m = wind::fit_wind_manifold(&observations, model)?;
    let b = wind::fit_wind_euclidean_baseline(&observations, model)?;
    let m_preds = m.predict_grid(&grid.lats, &grid.lons, climatology.as_ref())?;
    let b_preds = b.predict_grid(&grid.lats, &grid.lons, climatology.as_ref())?;
    write_records(&dir.join("observations.csv"), &observations)?;
    wind::write_predictions(&dir.join("predictions_manifold.csv"), &m_preds)?;
    wind::write_predictions(&dir.join("predictions_baseline.csv"), &b_preds)?;

    write_json(
        &dir.join("manifest.json"),
        &json!({
            "command": "wind",
            "mode": "files",
            "seed": cfg.u64("seed", 0)?,
            "inputs": {
                "grid": grid_path.display().to_string(),
                "track": track_path.display().to_string(),
                "climatology": cfg.path("climatology").map(|p| p.display().to_string()),
            },
            "observations": observations.len(),
            "noise_std": noise_std,
            "hyperparameters": model,
            "metrics": {
                "manifold": model_metrics(&m, &m_preds, &grid, &track)?,
                "baseline": model_metrics(&b, &b_preds, &grid, &track)?,
            },
            "files": ["observations.csv", "predictions_manifold.csv", "predictions_baseline.csv"],
        }),
    )
}

pub fn check(cfg: &RunConfig) -> Result<(), Failure> {
    let seed_value = cfg.u64("seed", 0)?;
    let results = checks::invariant_suite(seed_value)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    println!("{:<width$}  {:>12}  {:<16}  result  detail", "check", "value", "threshold");
    for r in &results {
        println!(
            "{:<width$}  {:>12.4e}  {:<16}  {:<6}  {}",
            r.name,
            r.value,
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    let dir = out_dir(cfg)?;
    write_json(&dir.join("check.json"), &json!({"seed": seed_value, "checks": results}))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}
