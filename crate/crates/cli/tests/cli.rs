mod common;

use std::fs;

use common::{gvfield, light_pendulum_config, reproducible, run_ok};
use serde_json::Value;

fn manifest(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn torus_sample_has_one_row_per_cell_with_two_coefficients() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    run_ok(&["sample-prior", "--manifold", "torus", "--kernel", "matern52", "--out", out]);
    let mut reader = csv::Reader::from_path(tmp.path().join("sample.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["x0", "x1", "c0", "c1"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 32 * 32);
    assert!(rows.iter().all(|r| r.iter().all(|v| v.parse::<f64>().unwrap().is_finite())));
}

#[test]
fn sample_prior_is_reproducible_and_seed_sensitive() {
    assert_eq!(reproducible(&["sample-prior", "--manifold", "sphere", "--seed", "3"]), Ok(2));
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["sample-prior", "--manifold", "circle", "--seed", "1", "--out", a.to_str().unwrap()]);
    run_ok(&["sample-prior", "--manifold", "circle", "--seed", "2", "--out", b.to_str().unwrap()]);
    assert_ne!(fs::read(a.join("sample.csv")).unwrap(), fs::read(b.join("sample.csv")).unwrap());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "seed = 1\nmanifold = circle\nlengthscale = 0.7\n").unwrap();
    let out = tmp.path().join("out");
    run_ok(&[
        "sample-prior",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    let m = manifest(&out.join("manifest.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["manifold"], "circle");
    assert_eq!(m["lengthscales"][0], 0.7);
}

#[test]
fn validation_errors_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(gvfield(&["sample-prior", "--config", cfg.to_str().unwrap(), "--out", out]).status.code(), Some(1));
    assert_eq!(gvfield(&["sample-prior", "--manifold", "klein", "--out", out]).status.code(), Some(1));
    assert_eq!(gvfield(&["sample-prior", "--lengthscale", "-1", "--out", out]).status.code(), Some(1));
    assert_eq!(gvfield(&["wind", "--out", out]).status.code(), Some(1));
    assert_eq!(gvfield(&["wind", "--kernel", "se", "--synthetic", "--out", out]).status.code(), Some(1));
    assert_eq!(gvfield(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn pendulum_with_zero_steps_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("zero.cfg");
    fs::write(&cfg, "steps = 0\n").unwrap();
    let out = gvfield(&["pendulum", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
}

#[test]
fn missing_input_file_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("files.cfg");
    fs::write(&cfg, "grid = /nonexistent/grid.csv\ntrack = /nonexistent/track.csv\n").unwrap();
    let out = gvfield(&["wind", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let missing = gvfield(&["check", "--config", "/nonexistent.cfg"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn pendulum_writes_artifacts_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = light_pendulum_config(tmp.path());
    let out = tmp.path().join("run");
    run_ok(&["pendulum", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let m = manifest(&out.join("manifest.json"));
    for f in m["files"].as_array().unwrap() {
        assert!(out.join(f.as_str().unwrap()).is_file(), "{f} listed but missing");
    }
    assert!(out.join("rollouts/rollout_1.csv").is_file());
    let header = fs::read_to_string(out.join("mean_field_manifold.csv")).unwrap();
    assert!(header.starts_with("q,p,dq,dp\n"));
    let state = gvfield::SvgpState::load(&out.join("state_manifold.json")).unwrap();
    assert_eq!(state.len(), 2 * 58);
    assert!(m["seam"]["manifold"].as_f64().unwrap() < m["seam"]["euclidean"].as_f64().unwrap());

    let files = reproducible(&["pendulum", "--config", cfg.to_str().unwrap(), "--seed", "5"]).unwrap();
    assert_eq!(files, m["files"].as_array().unwrap().len() + 1);
}

#[test]
fn synthetic_wind_emits_one_manifest_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("wind");
    run_ok(&["wind", "--synthetic", "--seeds", "5", "--seed", "10", "--out", out.to_str().unwrap()]);
    let mut seeds: Vec<u64> = fs::read_dir(&out)
        .unwrap()
        .map(|e| manifest(&e.unwrap().path().join("manifest.json"))["seed"].as_u64().unwrap())
        .collect();
    seeds.sort();
    assert_eq!(seeds, vec![10, 11, 12, 13, 14]);

    let m = manifest(&out.join("seed_12/manifest.json"));
    assert_eq!(m["noise_std"], 1.7);
    assert_eq!(m["hyperparameters"]["manifold_amplitude"], 11.5);
    assert!(m["metrics"]["manifold_rmse"].as_f64().unwrap().is_finite());
    // Manifests are written with sorted keys.
    let text = fs::read_to_string(out.join("seed_12/manifest.json")).unwrap();
    let top: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("  \"") && l.contains("\":"))
        .map(|l| l.split('"').nth(1).unwrap())
        .collect();
    assert_eq!(top.len(), 9);
    assert!(top.windows(2).all(|w| w[0] < w[1]), "{top:?}");
}

#[test]
fn wind_from_files_uses_track_winds_when_present() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = tmp.path().join("synth");
    run_ok(&["wind", "--synthetic", "--out", synth.to_str().unwrap()]);
    let grid = synth.join("seed_0/truth.csv");
    let track = tmp.path().join("track.csv");
    fs::write(&track, "t,lat,lon,u,v\n0,10,20,1.5,-2\n1,14,21,1.0,-1\n2,18,22,0.5,0\n").unwrap();
    let cfg = tmp.path().join("files.cfg");
    fs::write(&cfg, format!("grid = {}\ntrack = {}\nnoise_std = 0.5\n", grid.display(), track.display())).unwrap();
    let out = tmp.path().join("out");
    run_ok(&["wind", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let obs = fs::read_to_string(out.join("observations.csv")).unwrap();
    assert!(obs.lines().nth(1).unwrap().ends_with(",1.5,-2.0,0.5"), "{obs}");
    let m = manifest(&out.join("manifest.json"));
    assert_eq!(m["observations"], 3);
    assert!(m["metrics"]["baseline"]["seam"].as_f64().unwrap() > m["metrics"]["manifold"]["seam"].as_f64().unwrap());
}
