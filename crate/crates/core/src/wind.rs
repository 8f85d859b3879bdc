//! Wind interpolation on S² from satellite-track observations, with a
//! latitude–longitude Euclidean baseline.
//!
//! Winds are `(u, v)` = (eastward, northward) in m/s at `(lat, lon)` in
//! degrees. On the sphere chart `(φ, θ)` = (colatitude, longitude) in radians
//! the shipped frame is (south, east), so frame coefficients are `(−v, u)`.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::csv_error;
use crate::error::{GvfError, Result};
use crate::inference::{exact_posterior_fit, optimize_lengthscale, ExactPosterior, VectorObservationSet};
use crate::manifold::Manifold;
use crate::projected::{sample_prior_field, GaussianVectorFieldSample, MatrixKernel, ProjectedKernel, VectorField};
use crate::seed;
use crate::spectral::{AnyScalarKernel, KernelFamily};

pub const GRID_RESOLUTION_DEG: f64 = 5.625;
pub const DEFAULT_NOISE_STD: f64 = 1.7;
pub const ORBIT_INCLINATION_DEG: f64 = 96.7;
pub const ORBIT_PERIOD_MIN: f64 = 90.74;

/// Offset (degrees) either side of the 0°/360° meridian used by the seam metric.
const SEAM_OFFSET_DEG: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct WindGrid {
    /// Ascending, uniform.
    pub lats: Vec<f64>,
    /// Ascending, uniform, covering the full circle.
    pub lons: Vec<f64>,
    /// Row-major by latitude.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub label: String,
}

#[derive(Deserialize)]
struct GridRow {
    lat: f64,
    lon: f64,
    u: f64,
    v: f64,
}

fn uniform_step(values: &[f64], what: &str) -> Result<f64> {
    if values.len() < 2 {
        return Err(GvfError::shape(format!("at least 2 {what} values"), values.len()));
    }
    let step = values[1] - values[0];
    for w in values.windows(2) {
        if !(w[1] > w[0]) || ((w[1] - w[0]) - step).abs() > 1e-9 * step.abs().max(1.0) {
            return Err(GvfError::Domain(format!("{what} grid is not uniform and ascending")));
        }
    }
    Ok(step)
}

impl WindGrid {
    pub fn new(lats: Vec<f64>, lons: Vec<f64>, u: Vec<f64>, v: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        uniform_step(&lats, "latitude")?;
        let dlon = uniform_step(&lons, "longitude")?;
        if lats.iter().any(|l| l.abs() > 90.0) {
            return Err(GvfError::Domain("latitudes must lie in [-90, 90]".into()));
        }
        if lons[0] < 0.0 || *lons.last().unwrap() >= 360.0 {
            return Err(GvfError::Domain("longitudes must lie in [0, 360)".into()));
        }
        if ((lons.len() as f64) * dlon - 360.0).abs() > 1e-9 {
            return Err(GvfError::Domain("longitude grid must cover the full circle".into()));
        }
        let n = lats.len() * lons.len();
        if u.len() != n || v.len() != n {
            return Err(GvfError::shape(format!("{n} values per component"), format!("{}/{}", u.len(), v.len())));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(GvfError::Domain("wind components must be finite".into()));
        }
        Ok(WindGrid {
            lats,
            lons,
            u,
            v,
            label: label.into(),
        })
    }

    pub fn from_fn(lats: Vec<f64>, lons: Vec<f64>, label: &str, f: impl Fn(f64, f64) -> (f64, f64)) -> Result<Self> {
        let mut u = Vec::with_capacity(lats.len() * lons.len());
        let mut v = Vec::with_capacity(lats.len() * lons.len());
        for &lat in &lats {
            for &lon in &lons {
                let (a, b) = f(lat, lon);
                u.push(a);
                v.push(b);
            }
        }
        WindGrid::new(lats, lons, u, v, label)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.lons.len() + j
    }

    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let k = self.index(i, j);
        (self.u[k], self.v[k])
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.lats
            .iter()
            .flat_map(|&lat| self.lons.iter().map(move |&lon| (lat, lon)))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["lat", "lon", "u", "v"]).map_err(|e| csv_error(path, e))?;
        for (i, lat) in self.lats.iter().enumerate() {
            for (j, lon) in self.lons.iter().enumerate() {
                let (u, v) = self.at(i, j);
                w.write_record([lat.to_string(), lon.to_string(), u.to_string(), v.to_string()])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| GvfError::io(path, e))
    }
}

/// The 32 × 64 grid of cell centres at 5.625°.
pub fn standard_lats() -> Vec<f64> {
    (0..32).map(|i| -90.0 + GRID_RESOLUTION_DEG * (i as f64 + 0.5)).collect()
}

pub fn standard_lons() -> Vec<f64> {
    (0..64).map(|j| GRID_RESOLUTION_DEG * j as f64).collect()
}

/// Reads a `lat,lon,u,v` CSV in any row order. Rows are numbered from 1 at
/// the first data row.
pub fn load_wind_grid(path: &Path) -> Result<WindGrid> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (k, rec) in reader.deserialize::<GridRow>().enumerate() {
        let row = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => csv_error(path, e),
            _ => GvfError::Format {
                row: k + 1,
                message: e.to_string(),
            },
        })?;
        if ![row.lat, row.lon, row.u, row.v].iter().all(|x| x.is_finite()) {
            return Err(GvfError::Format {
                row: k + 1,
                message: "non-finite value".into(),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GvfError::Format {
            row: 0,
            message: "no data rows".into(),
        });
    }
    let mut lats: Vec<f64> = rows.iter().map(|r| r.lat).collect();
    let mut lons: Vec<f64> = rows.iter().map(|r| r.lon).collect();
    for axis in [&mut lats, &mut lons] {
        axis.sort_by(f64::total_cmp);
        axis.dedup();
    }
    let lat_index: HashMap<u64, usize> = lats.iter().enumerate().map(|(i, l)| (l.to_bits(), i)).collect();
    let lon_index: HashMap<u64, usize> = lons.iter().enumerate().map(|(j, l)| (l.to_bits(), j)).collect();
    let n = lats.len() * lons.len();
    let mut seen = vec![false; n];
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for (k, r) in rows.iter().enumerate() {
        let cell = lat_index[&r.lat.to_bits()] * lons.len() + lon_index[&r.lon.to_bits()];
        if seen[cell] {
            return Err(GvfError::Format {
                row: k + 1,
                message: format!("duplicate cell (lat {}, lon {})", r.lat, r.lon),
            });
        }
        seen[cell] = true;
        u[cell] = r.u;
        v[cell] = r.v;
    }
    if let Some(cell) = seen.iter().position(|s| !s) {
        return Err(GvfError::Format {
            row: rows.len() + 1,
            message: format!(
                "missing cell (lat {}, lon {})",
                lats[cell / lons.len()],
                lons[cell % lons.len()]
            ),
        });
    }
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    WindGrid::new(lats, lons, u, v, label).map_err(|e| GvfError::Format {
        row: 0,
        message: e.to_string(),
    })
}

/// Bilinear interpolation in `(lat, lon)` with longitudinal wrap-around.
pub fn interpolate_grid(grid: &WindGrid, points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let (lat0, lat1) = (grid.lats[0], *grid.lats.last().unwrap());
    let dlat = grid.lats[1] - grid.lats[0];
    let dlon = grid.lons[1] - grid.lons[0];
    let (nlat, nlon) = (grid.lats.len(), grid.lons.len());
    points
        .iter()
        .map(|&(lat, lon)| {
            if !(lat0..=lat1).contains(&lat) || !lon.is_finite() {
                return Err(GvfError::Domain(format!(
                    "latitude {lat} outside grid range [{lat0}, {lat1}]"
                )));
            }
            let y = (lat - lat0) / dlat;
            let i = (y.floor() as usize).min(nlat - 2);
            let t = y - i as f64;
            let x = (lon - grid.lons[0]).rem_euclid(360.0) / dlon;
            let j = (x.floor() as usize).min(nlon - 1);
            let s = x - j as f64;
            let j1 = (j + 1) % nlon;
            let blend = |f: &[f64]| {
                let lo = (1.0 - s) * f[grid.index(i, j)] + s * f[grid.index(i, j1)];
                let hi = (1.0 - s) * f[grid.index(i + 1, j)] + s * f[grid.index(i + 1, j1)];
                (1.0 - t) * lo + t * hi
            };
            Ok((blend(&grid.u), blend(&grid.v)))
        })
        .collect()
}

pub fn climatology_anomaly(observed: &[(f64, f64)], climatology: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if observed.len() != climatology.len() {
        return Err(GvfError::shape(observed.len(), climatology.len()));
    }
    Ok(observed
        .iter()
        .zip(climatology)
        .map(|(o, c)| (o.0 - c.0, o.1 - c.1))
        .collect())
}

/// Smooth zonal flow used as the synthetic climatology: easterlies at the
/// equator, westerly jets near ±45°, vanishing at the poles.
pub fn zonal_climatology(lat: f64, _lon: f64) -> (f64, f64) {
    let phi = lat.to_radians();
    (phi.cos() * (20.0 * (2.0 * phi).sin().powi(2) - 5.0), 0.0)
}

pub fn chart_point(lat: f64, lon: f64) -> Vec<f64> {
    vec![(90.0 - lat).to_radians(), lon.rem_euclid(360.0).to_radians()]
}

/// Flat baseline coordinates: latitude and raw longitude in radians.
pub fn flat_point(lat: f64, lon: f64) -> Vec<f64> {
    vec![lat.to_radians(), lon.to_radians()]
}

pub fn wind_to_frame(u: f64, v: f64) -> DVector<f64> {
    DVector::from_vec(vec![-v, u])
}

pub fn frame_to_wind(c: &DVector<f64>) -> (f64, f64) {
    (c[1], -c[0])
}

/// A synthetic truth: a prior draw of the anomaly plus the zonal climatology.
pub struct SyntheticWind {
    pub anomaly: GaussianVectorFieldSample<AnyScalarKernel>,
    /// Full wind on the standard grid.
    pub grid: WindGrid,
    pub climatology: WindGrid,
}

impl SyntheticWind {
    /// Exact full wind at a point.
    pub fn wind(&self, lat: f64, lon: f64) -> Result<(f64, f64)> {
        let (u, v) = frame_to_wind(&self.anomaly.eval(&chart_point(lat, lon))?);
        let (cu, cv) = zonal_climatology(lat, lon);
        Ok((u + cu, v + cv))
    }
}

pub fn synth_wind_field(seed_value: u64, kernel: &ProjectedKernel<AnyScalarKernel>) -> Result<SyntheticWind> {
    if *kernel.manifold() != Manifold::Sphere {
        return Err(GvfError::Domain("synthetic wind needs a sphere kernel".into()));
    }
    let anomaly = sample_prior_field(kernel, 1, seed::derive(seed_value, "wind-truth"))?;
    let cells = standard_cells();
    let values: Vec<DVector<f64>> = {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(lat, lon)| anomaly.eval(&chart_point(lat, lon)))
            .collect::<Result<_>>()?
    };
    let climatology = WindGrid::from_fn(standard_lats(), standard_lons(), "climatology", zonal_climatology)?;
    let mut u = Vec::with_capacity(cells.len());
    let mut v = Vec::with_capacity(cells.len());
    for (k, c) in values.iter().enumerate() {
        let (a, b) = frame_to_wind(c);
        u.push(a + climatology.u[k]);
        v.push(b + climatology.v[k]);
    }
    let grid = WindGrid::new(standard_lats(), standard_lons(), u, v, format!("synthetic-{seed_value}"))?;
    Ok(SyntheticWind {
        anomaly,
        grid,
        climatology,
    })
}

fn standard_cells() -> Vec<(f64, f64)> {
    let lons = standard_lons();
    standard_lats()
        .into_iter()
        .flat_map(|lat| lons.iter().map(move |&lon| (lat, lon)))
        .collect()
}

/// Orbit geometry of a synthetic track: longitude of the ascending node and
/// the argument of latitude at the first sample, both in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrackStart {
    pub node_lon: f64,
    pub phase: f64,
}

impl Default for TrackStart {
    fn default() -> Self {
        // From 60° the first hour passes over both poles.
        TrackStart {
            node_lon: 30.0,
            phase: 60.0,
        }
    }
}

/// Great-circle polar orbit sampled once per minute (Earth rotation ignored).
pub fn synth_track(start: TrackStart, minutes: usize) -> Result<Vec<(f64, f64)>> {
    if minutes == 0 {
        return Err(GvfError::Config("a track needs at least one minute".into()));
    }
    let (so, co) = start.node_lon.to_radians().sin_cos();
    let (si, ci) = ORBIT_INCLINATION_DEG.to_radians().sin_cos();
    let node = [co, so, 0.0];
    let normal_in_plane = [-ci * so, ci * co, si];
    Ok((0..minutes)
        .map(|k| {
            let arg = start.phase.to_radians() + TAU * k as f64 / ORBIT_PERIOD_MIN;
            let (s, c) = arg.sin_cos();
            let r: Vec<f64> = (0..3).map(|a| c * node[a] + s * normal_in_plane[a]).collect();
            let lat = r[2].clamp(-1.0, 1.0).asin().to_degrees();
            let lon = r[1].atan2(r[0]).to_degrees().rem_euclid(360.0);
            (lat, lon)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackObservation {
    /// Minutes from the first sample.
    pub time: f64,
    pub lat: f64,
    pub lon: f64,
    /// Anomaly components.
    pub u: f64,
    pub v: f64,
    pub noise_std: f64,
}

/// Interpolates the grid along the track and subtracts the climatology.
pub fn track_observations(
    grid: &WindGrid,
    climatology: Option<&WindGrid>,
    track: &[(f64, f64)],
    noise_std: f64,
) -> Result<Vec<TrackObservation>> {
    if !(noise_std > 0.0) {
        return Err(GvfError::Config(format!("noise std must be positive, got {noise_std}")));
    }
    let observed = interpolate_grid(grid, track)?;
    let anomaly = match climatology {
        Some(c) => climatology_anomaly(&observed, &interpolate_grid(c, track)?)?,
        None => observed,
    };
    Ok(track
        .iter()
        .zip(anomaly)
        .enumerate()
        .map(|(k, (&(lat, lon), (u, v)))| TrackObservation {
            time: k as f64,
            lat,
            lon,
            u,
            v,
            noise_std,
        })
        .collect())
}

#[derive(Deserialize)]
struct TrackRow {
    t: f64,
    lat: f64,
    lon: f64,
    u: Option<f64>,
    v: Option<f64>,
}

/// Reads a `t,lat,lon[,u,v]` track. Rows without winds get `None`.
pub fn load_track(path: &Path) -> Result<Vec<(f64, f64, f64, Option<(f64, f64)>)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (k, rec) in reader.deserialize::<TrackRow>().enumerate() {
        let r = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => csv_error(path, e),
            _ => GvfError::Format {
                row: k + 1,
                message: e.to_string(),
            },
        })?;
        let wind = match (r.u, r.v) {
            (Some(u), Some(v)) => Some((u, v)),
            (None, None) => None,
            _ => {
                return Err(GvfError::Format {
                    row: k + 1,
                    message: "u and v must both be present or both absent".into(),
                })
            }
        };
        out.push((r.t, r.lat, r.lon, wind));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct WindModelConfig {
    /// Radians.
    pub lengthscale: f64,
    pub manifold_amplitude: f64,
    pub baseline_amplitude: f64,
    /// Read amplitudes as standard deviations rather than variances.
    pub amplitude_is_std: bool,
    pub learn_lengthscale: bool,
    pub truncation: Option<usize>,
}

impl Default for WindModelConfig {
    fn default() -> Self {
        WindModelConfig {
            lengthscale: 0.4,
            manifold_amplitude: 11.5,
            baseline_amplitude: 2.2,
            amplitude_is_std: false,
            learn_lengthscale: false,
            truncation: None,
        }
    }
}

impl WindModelConfig {
    fn variance(&self, a: f64) -> f64 {
        if self.amplitude_is_std {
            a * a
        } else {
            a
        }
    }

    pub fn manifold_kernel(&self) -> Result<ProjectedKernel<AnyScalarKernel>> {
        Ok(ProjectedKernel::new(AnyScalarKernel::build(
            &Manifold::Sphere,
            KernelFamily::Matern32,
            &[self.lengthscale],
            self.variance(self.manifold_amplitude),
            self.truncation,
        )?))
    }

    pub fn baseline_kernel(&self) -> Result<ProjectedKernel<AnyScalarKernel>> {
        Ok(ProjectedKernel::new(AnyScalarKernel::build(
            &Manifold::Euclidean(2),
            KernelFamily::Matern32,
            &[self.lengthscale],
            self.variance(self.baseline_amplitude),
            None,
        )?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum WindModel {
    Manifold,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPrediction {
    pub lat: f64,
    pub lon: f64,
    pub mean_u: f64,
    pub mean_v: f64,
    pub cov_uu: f64,
    pub cov_uv: f64,
    pub cov_vv: f64,
    pub std_norm: f64,
}

pub struct WindPosterior {
    pub model: WindModel,
    pub posterior: ExactPosterior<ProjectedKernel<AnyScalarKernel>>,
}

fn observation_set(model: WindModel, obs: &[TrackObservation]) -> Result<VectorObservationSet> {
    let first = obs.first().ok_or_else(|| GvfError::shape("at least 1 observation", 0))?;
    if obs.iter().any(|o| o.noise_std != first.noise_std) {
        return Err(GvfError::Config("all track observations must share one noise std".into()));
    }
    let (points, values) = obs
        .iter()
        .map(|o| match model {
            WindModel::Manifold => (chart_point(o.lat, o.lon), wind_to_frame(o.u, o.v)),
            WindModel::Baseline => (flat_point(o.lat, o.lon), DVector::from_vec(vec![o.u, o.v])),
        })
        .unzip();
    VectorObservationSet::new(points, values, first.noise_std * first.noise_std)
}

fn fit(model: WindModel, obs: &[TrackObservation], kernel: ProjectedKernel<AnyScalarKernel>, learn: bool) -> Result<WindPosterior> {
    let set = observation_set(model, obs)?;
    let posterior = if learn {
        optimize_lengthscale(&kernel, &set, 0.1, 10.0, 30)?
    } else {
        exact_posterior_fit(kernel, set)?
    };
    Ok(WindPosterior { model, posterior })
}

/// Projected Matérn-3/2 model on S².
pub fn fit_wind_manifold(obs: &[TrackObservation], config: &WindModelConfig) -> Result<WindPosterior> {
    fit(WindModel::Manifold, obs, config.manifold_kernel()?, config.learn_lengthscale)
}

/// Independent Matérn-3/2 outputs on flat (lat, lon) with no wrap-around.
pub fn fit_wind_euclidean_baseline(obs: &[TrackObservation], config: &WindModelConfig) -> Result<WindPosterior> {
    fit(WindModel::Baseline, obs, config.baseline_kernel()?, config.learn_lengthscale)
}

impl WindPosterior {
    pub fn lengthscale(&self) -> f64 {
        use crate::spectral::ScalarKernel;
        self.posterior.kernel().scalar().lengthscales()[0]
    }

    /// Predictions of the full wind at `(lat, lon)` points; the climatology,
    /// when given, is interpolated and added back to the mean.
    pub fn predict(&self, points: &[(f64, f64)], climatology: Option<&WindGrid>) -> Result<Vec<GridPrediction>> {
        let xs: Vec<Vec<f64>> = points
            .iter()
            .map(|&(lat, lon)| match self.model {
                WindModel::Manifold => chart_point(lat, lon),
                WindModel::Baseline => flat_point(lat, lon),
            })
            .collect();
        let (means, covs) = self.posterior.predict(&xs)?;
        let added = match climatology {
            Some(c) => interpolate_grid(c, points)?,
            None => vec![(0.0, 0.0); points.len()],
        };
        Ok(points
            .iter()
            .zip(means.iter().zip(&covs))
            .zip(added)
            .map(|((&(lat, lon), (m, c)), (cu, cv))| {
                let (mu, mv, cov) = match self.model {
                    WindModel::Manifold => {
                        let (mu, mv) = frame_to_wind(m);
                        // (u, v) = T c with T = [[0, 1], [−1, 0]].
                        let t = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
                        (mu, mv, &t * c * t.transpose())
                    }
                    WindModel::Baseline => (m[0], m[1], c.clone()),
                };
                GridPrediction {
                    lat,
                    lon,
                    mean_u: mu + cu,
                    mean_v: mv + cv,
                    cov_uu: cov[(0, 0)],
                    cov_uv: cov[(0, 1)],
                    cov_vv: cov[(1, 1)],
                    std_norm: (cov[(0, 0)] + cov[(1, 1)]).max(0.0).sqrt(),
                }
            })
            .collect())
    }

    pub fn predict_grid(&self, lats: &[f64], lons: &[f64], climatology: Option<&WindGrid>) -> Result<Vec<GridPrediction>> {
        let points: Vec<(f64, f64)> = lats
            .iter()
            .flat_map(|&lat| lons.iter().map(move |&lon| (lat, lon)))
            .collect();
        self.predict(&points, climatology)
    }

    /// Mean over latitudes of `|std(lon = 0⁺) − std(lon = 360⁻)|`.
    pub fn seam_discontinuity(&self, lats: &[f64]) -> Result<f64> {
        let east: Vec<(f64, f64)> = lats.iter().map(|&l| (l, SEAM_OFFSET_DEG)).collect();
        let west: Vec<(f64, f64)> = lats.iter().map(|&l| (l, 360.0 - SEAM_OFFSET_DEG)).collect();
        let a = self.predict(&east, None)?;
        let b = self.predict(&west, None)?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x.std_norm - y.std_norm).abs()).sum::<f64>() / lats.len() as f64)
    }

    /// Coefficient of variation of the posterior std-norm at the given points.
    pub fn std_cv(&self, points: &[(f64, f64)]) -> Result<f64> {
        let s: Vec<f64> = self.predict(points, None)?.iter().map(|p| p.std_norm).collect();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s.len() as f64;
        Ok(var.sqrt() / mean)
    }

    /// Mean std-norm at points poleward of 80° over that at points with
    /// 30° ≤ |lat| ≤ 60°; `None` when either group is empty.
    pub fn pole_ratio(&self, points: &[(f64, f64)]) -> Result<Option<f64>> {
        let preds = self.predict(points, None)?;
        let mean_of = |keep: &dyn Fn(f64) -> bool| {
            let s: Vec<f64> = preds.iter().filter(|p| keep(p.lat.abs())).map(|p| p.std_norm).collect();
            (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
        };
        Ok(match (mean_of(&|a| a > 80.0), mean_of(&|a| (30.0..=60.0).contains(&a))) {
            (Some(p), Some(m)) => Some(p / m),
            _ => None,
        })
    }
}

/// Root-mean-square vector error of predicted means against a grid.
pub fn rmse(predictions: &[GridPrediction], truth: &WindGrid) -> Result<f64> {
    if predictions.len() != truth.u.len() {
        return Err(GvfError::shape(truth.u.len(), predictions.len()));
    }
    let sum: f64 = predictions
        .iter()
        .enumerate()
        .map(|(k, p)| (p.mean_u - truth.u[k]).powi(2) + (p.mean_v - truth.v[k]).powi(2))
        .sum();
    Ok((sum / predictions.len() as f64).sqrt())
}

pub fn write_predictions(path: &Path, predictions: &[GridPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for p in predictions {
        w.serialize(p).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| GvfError::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct WindMetrics {
    pub manifold_rmse: f64,
    pub baseline_rmse: f64,
    pub manifold_seam: f64,
    pub baseline_seam: f64,
    pub manifold_track_cv: f64,
    pub manifold_pole_ratio: Option<f64>,
    pub baseline_pole_ratio: Option<f64>,
    pub manifold_lengthscale: f64,
    pub baseline_lengthscale: f64,
}

pub struct SyntheticRun {
    pub seed: u64,
    pub start: TrackStart,
    pub truth: SyntheticWind,
    pub observations: Vec<TrackObservation>,
    pub manifold: Vec<GridPrediction>,
    pub baseline: Vec<GridPrediction>,
    pub metrics: WindMetrics,
}

/// Track geometry for a seed: node longitude drawn uniformly, default phase.
pub fn seeded_track_start(seed_value: u64) -> TrackStart {
    use rand::Rng;
    let mut rng = seed::rng_for(seed_value, "track");
    TrackStart {
        node_lon: rng.random_range(0.0..360.0),
        ..TrackStart::default()
    }
}

/// One synthetic experiment: truth draw, 60-minute track, both fits, metrics.
pub fn run_synthetic(seed_value: u64, config: &WindModelConfig, minutes: usize) -> Result<SyntheticRun> {
    let truth = synth_wind_field(seed_value, &config.manifold_kernel()?)?;
    let start = seeded_track_start(seed_value);
    let track = synth_track(start, minutes)?;
    let observations = track_observations(&truth.grid, Some(&truth.climatology), &track, DEFAULT_NOISE_STD)?;
    let m = fit_wind_manifold(&observations, config)?;
    let b = fit_wind_euclidean_baseline(&observations, config)?;
    let lats = standard_lats();
    let lons = standard_lons();
    let manifold = m.predict_grid(&lats, &lons, Some(&truth.climatology))?;
    let baseline = b.predict_grid(&lats, &lons, Some(&truth.climatology))?;
    let metrics = WindMetrics {
        manifold_rmse: rmse(&manifold, &truth.grid)?,
        baseline_rmse: rmse(&baseline, &truth.grid)?,
        manifold_seam: m.seam_discontinuity(&lats)?,
        baseline_seam: b.seam_discontinuity(&lats)?,
        manifold_track_cv: m.std_cv(&track)?,
        manifold_pole_ratio: m.pole_ratio(&track)?,
        baseline_pole_ratio: b.pole_ratio(&track)?,
        manifold_lengthscale: m.lengthscale(),
        baseline_lengthscale: b.lengthscale(),
    };
    Ok(SyntheticRun {
        seed: seed_value,
        start,
        truth,
        observations,
        manifold,
        baseline,
        metrics,
    })
}

/// Geodesic distance in radians between two `(lat, lon)` points.
pub fn great_circle_distance(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    Manifold::Sphere.geodesic_distance(&chart_point(a.0, a.1), &chart_point(b.0, b.1))
}
