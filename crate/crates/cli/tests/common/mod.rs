#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn gvfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gvfield"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str]) {
    let out = gvfield(args);
    assert!(
        out.status.success(),
        "gvfield {args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn collect(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, String>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(&path, root, out);
        } else {
            let digest = Sha256::digest(fs::read(&path).unwrap());
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), hex);
        }
    }
}

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn checksums(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    collect(dir, dir, &mut out);
    out
}

/// Runs the same command into two fresh directories and compares every output file.
pub fn reproducible(args: &[&str]) -> Result<usize, String> {
    let tmp = tempfile::tempdir().unwrap();
    let mut sums = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let mut full: Vec<&str> = args.to_vec();
        let dir_str = dir.to_str().unwrap().to_string();
        full.extend(["--out", &dir_str]);
        let out = gvfield(&full);
        if !out.status.success() {
            return Err(format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        sums.push(checksums(&dir));
    }
    if sums[0].is_empty() {
        return Err("no files written".into());
    }
    if sums[0] != sums[1] {
        let differing: Vec<_> = sums[0]
            .iter()
            .filter(|(k, v)| sums[1].get(*k) != Some(v))
            .map(|(k, _)| k.display().to_string())
            .collect();
        return Err(format!("differing files: {differing:?}"));
    }
    Ok(sums[0].len())
}

/// A pendulum config small enough for repeated test runs.
pub fn light_pendulum_config(dir: &Path) -> PathBuf {
    let path = dir.join("pendulum.cfg");
    fs::write(&path, "# quick run\nsteps = 60\nrollouts = 2\nrollout_steps = 50\nfeatures = 64\n").unwrap();
    path
}
