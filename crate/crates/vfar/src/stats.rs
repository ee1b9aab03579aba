//! Shared numeric helpers: distribution tails and least squares.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

/// Upper tail probability of the chi-squared distribution.
pub(crate) fn chi_squared_sf(x: f64, df: f64) -> f64 {
    if df <= 0.0 {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    match ChiSquared::new(df) {
        Ok(d) => d.sf(x).clamp(0.0, 1.0),
        Err(_) => f64::NAN,
    }
}

/// Upper tail probability of the F distribution.
pub(crate) fn f_sf(x: f64, df1: f64, df2: f64) -> f64 {
    if df1 <= 0.0 || df2 <= 0.0 {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    match FisherSnedecor::new(df1, df2) {
        Ok(d) => d.sf(x).clamp(0.0, 1.0),
        Err(_) => f64::NAN,
    }
}

/// Ordinary least squares fit of `y` on the columns of `x`, solved through a
/// singular value decomposition so that near-collinear designs are detected
/// instead of silently amplified.
pub(crate) struct OlsFit {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rss: f64,
    /// Diagonal of (XᵀX)⁻¹, for coefficient standard errors.
    pub xtx_inv_diag: DVector<f64>,
}

pub(crate) fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<OlsFit> {
    let k = x.ncols();
    if k == 0 {
        let rss = y.dot(y);
        return Some(OlsFit {
            coefficients: DVector::zeros(0),
            residuals: y.clone(),
            rss,
            xtx_inv_diag: DVector::zeros(0),
        });
    }
    if x.nrows() < k {
        return None;
    }
    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = max_sv * 1e-10 * x.nrows().max(k) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < k {
        return None;
    }
    let coefficients = svd.solve(y, tol).ok()?.column(0).into_owned();
    let residuals = y - x * &coefficients;
    let rss = residuals.dot(&residuals);
    let v = svd.v_t.as_ref()?.transpose();
    let xtx_inv_diag = DVector::from_fn(k, |a, _| {
        (0..k)
            .map(|j| {
                let s = svd.singular_values[j];
                let vij = v[(a, j)];
                vij * vij / (s * s)
            })
            .sum()
    });
    Some(OlsFit {
        coefficients,
        residuals,
        rss,
        xtx_inv_diag,
    })
}

/// Spectral radius of the companion matrix of the lag polynomial given by
/// `coefficient_matrices` (each q×q); radius < 1 means a stationary process.
pub fn companion_spectral_radius(coefficient_matrices: &[DMatrix<f64>]) -> f64 {
    let p = coefficient_matrices.len();
    if p == 0 {
        return 0.0;
    }
    let q = coefficient_matrices[0].nrows();
    let mut companion = DMatrix::zeros(p * q, p * q);
    for (k, omega) in coefficient_matrices.iter().enumerate() {
        companion.view_mut((0, k * q), (q, q)).copy_from(omega);
    }
    for k in 1..p {
        companion
            .view_mut((k * q, (k - 1) * q), (q, q))
            .copy_from(&DMatrix::identity(q, q));
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}
