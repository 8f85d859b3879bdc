//! Factorization helpers shared by the inference code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GvfError, Result};

/// Relative jitter levels tried in order (multiples of the mean diagonal).
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factorization of a symmetric positive (semi-)definite matrix,
/// adding diagonal jitter `τ · trace/n` with `τ = 0, 1e-10, 1e-9, …, 1e-4`
/// until it succeeds. Returns the factor and the absolute jitter used.
pub fn jittered_cholesky(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(GvfError::shape("square matrix", format!("{}x{}", a.nrows(), a.ncols())));
    }
    if n == 0 {
        return Err(GvfError::Domain("cannot factor an empty matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GvfError::Conditioning {
            min_eigenvalue: f64::NAN,
            jitter: 0.0,
        });
    }
    let scale = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    if let Some(c) = a.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let mut tau = JITTER_START;
    while tau <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = tau * scale;
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(c) = b.cholesky() {
            log::debug!("cholesky needed jitter {jitter:e}");
            return Ok((c, jitter));
        }
        tau *= 10.0;
    }
    let min_eigenvalue = a.clone().symmetric_eigen().eigenvalues.min();
    Err(GvfError::Conditioning {
        min_eigenvalue,
        jitter: JITTER_MAX * scale,
    })
}

/// `log det A` from a Cholesky factor.
pub fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Lower-triangular `L` with `L Lᵀ = A` for a small symmetric PSD matrix,
/// tolerating exact singularity (zero pivots give zero columns).
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(GvfError::shape("square matrix", format!("{}x{}", a.nrows(), a.ncols())));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).amax() > 1e-10 * scale {
        return Err(GvfError::State("covariance block is not symmetric".into()));
    }
    let tol = 1e-14 * scale * n as f64;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let s = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if s < -1e-10 * scale {
            return Err(GvfError::State(format!(
                "covariance block is not positive semi-definite (pivot {s:e})"
            )));
        }
        if s <= tol {
            continue;
        }
        let d = s.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let v = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

/// Block-diagonal matrix from square blocks.
pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((o, o), (k, k)).copy_from(b);
        o += k;
    }
    out
}

/// Stacks vectors into one.
pub fn stack(vs: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(vs.iter().map(|v| v.len()).sum(), vs.iter().flat_map(|v| v.iter().copied()))
}

/// Splits a stacked vector into `n` chunks of length `d`.
pub fn unstack(v: &DVector<f64>, d: usize) -> Vec<DVector<f64>> {
    v.as_slice()
        .chunks(d)
        .map(|c| DVector::from_column_slice(c))
        .collect()
}
