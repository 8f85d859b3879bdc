//! Real orthonormal spherical harmonics and Legendre polynomials.
//!
//! Harmonics are indexed by degree `l` and order `m ∈ [-l, l]`; positive orders
//! carry `cos(mθ)`, negative orders `sin(|m|θ)`. Associated Legendre functions
//! are computed fully normalized with the standard three-term recurrences, so
//! nothing overflows at the degrees used here.

use std::f64::consts::PI;

/// Flat index of `(l, m)` in a table holding all degrees up to some `L`.
#[inline]
pub fn harmonic_index(degree: u32, order: i32) -> usize {
    let l = degree as i64;
    (l * l + l + order as i64) as usize
}

/// Normalized associated Legendre values `P̄_l^m(cos φ)` for `0 ≤ m ≤ l ≤ max_degree`,
/// stored at `l (l + 1) / 2 + m`. The normalization makes
/// `P̄_l^m(cos φ) e^{imθ}` orthonormal on the unit sphere.
pub fn normalized_legendre(max_degree: u32, phi: f64) -> Vec<f64> {
    let lmax = max_degree as usize;
    let (s, x) = phi.sin_cos();
    let idx = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let mut p = vec![0.0; (lmax + 1) * (lmax + 2) / 2];
    p[0] = (0.25 / PI).sqrt();
    for m in 1..=lmax {
        let mf = m as f64;
        p[idx(m, m)] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * p[idx(m - 1, m - 1)];
    }
    for m in 0..lmax {
        p[idx(m + 1, m)] = (2.0 * m as f64 + 3.0).sqrt() * x * p[idx(m, m)];
    }
    for m in 0..=lmax {
        let mf = m as f64;
        for l in (m + 2)..=lmax {
            let lf = l as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[idx(l, m)] = a * (x * p[idx(l - 1, m)] - b * p[idx(l - 2, m)]);
        }
    }
    p
}

/// All real harmonics up to `max_degree` at `(φ, θ)`, indexed by [`harmonic_index`].
pub fn real_harmonics(max_degree: u32, phi: f64, theta: f64) -> Vec<f64> {
    let lmax = max_degree as usize;
    let p = normalized_legendre(max_degree, phi);
    let idx = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let trig: Vec<(f64, f64)> = (0..=lmax).map(|m| (m as f64 * theta).sin_cos()).collect();
    let mut out = vec![0.0; (lmax + 1) * (lmax + 1)];
    for l in 0..=lmax {
        out[harmonic_index(l as u32, 0)] = p[idx(l, 0)];
        for m in 1..=l {
            let v = std::f64::consts::SQRT_2 * p[idx(l, m)];
            let (sin, cos) = trig[m];
            out[harmonic_index(l as u32, m as i32)] = v * cos;
            out[harmonic_index(l as u32, -(m as i32))] = v * sin;
        }
    }
    out
}

/// A single real harmonic; costs O(l) per call.
pub fn real_harmonic(degree: u32, order: i32, phi: f64, theta: f64) -> f64 {
    let l = degree as usize;
    let m = order.unsigned_abs() as usize;
    let p = normalized_legendre(degree, phi);
    let v = p[l * (l + 1) / 2 + m];
    match order {
        0 => v,
        o if o > 0 => std::f64::consts::SQRT_2 * v * (m as f64 * theta).cos(),
        _ => std::f64::consts::SQRT_2 * v * (m as f64 * theta).sin(),
    }
}

/// Legendre polynomials `P_0(t) … P_L(t)`.
pub fn legendre_polynomials(max_degree: u32, t: f64) -> Vec<f64> {
    let lmax = max_degree as usize;
    let mut p = Vec::with_capacity(lmax + 1);
    p.push(1.0);
    if lmax >= 1 {
        p.push(t);
    }
    for l in 2..=lmax {
        let lf = l as f64;
        let next = ((2.0 * lf - 1.0) * t * p[l - 1] - (lf - 1.0) * p[l - 2]) / lf;
        p.push(next);
    }
    p
}
