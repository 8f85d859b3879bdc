//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::Failure;

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "manifold",
    "kernel",
    "lengthscale",
    "amplitude",
    "truncation",
    "features",
    "synthetic",
    "seeds",
    // pendulum
    "steps",
    "friction",
    "mass",
    "length",
    "gravity",
    "step_size",
    "noise",
    "rollouts",
    "rollout_steps",
    "inducing",
    "svgp_steps",
    "learning_rate",
    "batch_size",
    // wind
    "grid",
    "track",
    "climatology",
    "minutes",
    "noise_std",
    "baseline_amplitude",
    "amplitude_is_std",
    "learn_lengthscale",
];

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::Validation(format!("config line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Failure::Validation(format!("config line {}: unknown key '{key}'", n + 1)));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        debug_assert!(KNOWN_KEYS.contains(&key));
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn string(&self, key: &str, default: &str) -> String {
        self.values.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(PathBuf::from)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Failure::Validation(format!("{key}: cannot parse '{v}'"))),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, Failure> {
        let v = self.parsed(key)?.unwrap_or(default);
        if !v.is_finite() {
            return Err(Failure::Validation(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64, Failure> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize, Failure> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn optional_usize(&self, key: &str) -> Result<Option<usize>, Failure> {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, Failure> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// Comma-separated list of numbers.
    pub fn f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, Failure> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Failure::Validation(format!("{key}: cannot parse '{v}'")))
                })
                .collect(),
        }
    }
}
