//! Residual whiteness diagnostics for fitted VAR models: per-lag
//! cross-correlation-matrix significance and the multivariate portmanteau
//! (Ljung-Box) test.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::chi_squared_sf;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("insufficient data: {0} rows for max lag {1}")]
    InsufficientData(usize, usize),
    #[error("lag-0 residual covariance is singular")]
    SingularCovariance,
}

/// Whiteness summary for one residual matrix. `portmanteau_p_values[k-1]` is
/// `None` for k <= fitted order p, where the chi-squared reference has no
/// degrees of freedom left.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhitenessReport {
    pub max_lag: usize,
    pub ccm_p_values: Vec<f64>,
    pub portmanteau_p_values: Vec<Option<f64>>,
    pub fitted_order: usize,
    pub dimension: usize,
    /// True when no cross-correlation matrix at lags 1..=5 is significant at
    /// the 0.05 level, the adequacy reading used for a fitted model.
    pub adequate_first_5: bool,
}

/// Lag-l autocovariance matrices Ĉ_0..Ĉ_max of the column-centered rows,
/// each with divisor m.
fn autocovariances(residuals: &DMatrix<f64>, max_lag: usize) -> Vec<DMatrix<f64>> {
    let m = residuals.nrows();
    let q = residuals.ncols();
    let mean = residuals.row_mean();
    let mut centered = residuals.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    (0..=max_lag)
        .map(|lag| {
            let mut c = DMatrix::zeros(q, q);
            for t in 0..m - lag {
                c += centered.row(t).transpose() * centered.row(t + lag);
            }
            c / m as f64
        })
        .collect()
}

/// Per-lag significance of the residual cross-correlation matrices: for each
/// lag k the statistic m·ΣᵢⱼR_k(i,j)² is referred to chi-squared with q²
/// degrees of freedom. Returns one p-value per lag 1..=max_lag.
pub fn ccm_significance(
    residuals: &DMatrix<f64>,
    max_lag: usize,
) -> Result<Vec<f64>, DiagnosticsError> {
    let m = residuals.nrows();
    let q = residuals.ncols();
    if max_lag == 0 {
        return Ok(Vec::new());
    }
    if m <= max_lag + q {
        return Err(DiagnosticsError::InsufficientData(m, max_lag));
    }
    let cov = autocovariances(residuals, max_lag);
    let sd: Vec<f64> = (0..q).map(|i| cov[0][(i, i)].sqrt()).collect();
    if sd.iter().any(|&s| s <= 0.0) {
        return Err(DiagnosticsError::SingularCovariance);
    }
    Ok((1..=max_lag)
        .map(|k| {
            let mut sum_sq = 0.0;
            for i in 0..q {
                for j in 0..q {
                    let r = cov[k][(i, j)] / (sd[i] * sd[j]);
                    sum_sq += r * r;
                }
            }
            chi_squared_sf(m as f64 * sum_sq, (q * q) as f64)
        })
        .collect())
}

/// Multivariate portmanteau statistics
/// Q_k = m² Σ_{l<=k} (m-l)⁻¹ tr(Ĉ_lᵀ Ĉ_0⁻¹ Ĉ_l Ĉ_0⁻¹), referred to
/// chi-squared with q²(k - p) degrees of freedom for k > p.
pub fn portmanteau_test(
    residuals: &DMatrix<f64>,
    max_lag: usize,
    fitted_order: usize,
) -> Result<Vec<Option<f64>>, DiagnosticsError> {
    let m = residuals.nrows();
    let q = residuals.ncols();
    if max_lag == 0 {
        return Ok(Vec::new());
    }
    if m <= max_lag + q {
        return Err(DiagnosticsError::InsufficientData(m, max_lag));
    }
    let cov = autocovariances(residuals, max_lag);
    let c0_inv = cov[0]
        .clone()
        .cholesky()
        .ok_or(DiagnosticsError::SingularCovariance)?
        .inverse();
    let mut q_stat = 0.0;
    let mut out = Vec::with_capacity(max_lag);
    for (k, cov_k) in cov.iter().enumerate().skip(1) {
        let term = (cov_k.transpose() * &c0_inv * cov_k * &c0_inv).trace();
        q_stat += (m as f64).powi(2) / (m - k) as f64 * term;
        if k > fitted_order {
            let df = (q * q * (k - fitted_order)) as f64;
            out.push(Some(chi_squared_sf(q_stat, df)));
        } else {
            out.push(None);
        }
    }
    Ok(out)
}

/// Convenience bundle of both diagnostics plus the first-five adequacy flag.
pub fn whiteness_report(
    residuals: &DMatrix<f64>,
    max_lag: usize,
    fitted_order: usize,
) -> Result<WhitenessReport, DiagnosticsError> {
    let ccm_p_values = ccm_significance(residuals, max_lag)?;
    let portmanteau_p_values = portmanteau_test(residuals, max_lag, fitted_order)?;
    let adequate_first_5 = ccm_p_values.iter().take(5).all(|&p| p >= 0.05);
    Ok(WhitenessReport {
        max_lag,
        ccm_p_values,
        portmanteau_p_values,
        fitted_order,
        dimension: residuals.ncols(),
        adequate_first_5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use rayon::prelude::*;

    fn gaussian(m: usize, q: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, q, |_, _| StandardNormal.sample(&mut rng))
    }

    fn ar1_panel(m: usize, q: usize, coefficient: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = DMatrix::zeros(m, q);
        for j in 0..q {
            let mut prev = 0.0;
            for i in 0..m {
                let x: f64 = StandardNormal.sample(&mut rng);
                let v = coefficient * prev + x;
                out[(i, j)] = v;
                prev = v;
            }
        }
        out
    }

    #[test]
    fn ccm_null_rejection_rate_is_calibrated() {
        let lag = 3usize;
        let rejections: Vec<usize> = (0..500u64)
            .into_par_iter()
            .map(|seed| {
                let p = ccm_significance(&gaussian(500, 3, 100_000 + seed), lag).unwrap();
                p.iter().filter(|&&v| v < 0.05).count()
            })
            .collect();
        let rate = rejections.iter().sum::<usize>() as f64 / (500 * lag) as f64;
        assert!(
            (0.03..=0.07).contains(&rate),
            "per-lag rejection rate {rate} outside [0.03, 0.07]"
        );
    }

    #[test]
    fn ccm_detects_unfitted_var_signal() {
        let detected = (0..100u64)
            .into_par_iter()
            .filter(|&seed| {
                let panel = ar1_panel(1000, 2, 0.6, 200_000 + seed);
                let p = ccm_significance(&panel, 1).unwrap();
                p[0] < 0.01
            })
            .count();
        assert!(detected >= 99, "lag-1 correlation detected in only {detected}/100 seeds");
    }

    #[test]
    fn zero_max_lag_gives_empty_vectors() {
        let residuals = gaussian(50, 2, 1);
        assert!(ccm_significance(&residuals, 0).unwrap().is_empty());
        assert!(portmanteau_test(&residuals, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn portmanteau_null_rejection_rate_is_calibrated() {
        let lag = 5usize;
        let rejections: Vec<Vec<bool>> = (0..500u64)
            .into_par_iter()
            .map(|seed| {
                let p = portmanteau_test(&gaussian(500, 3, 300_000 + seed), lag, 0).unwrap();
                p.iter().map(|v| v.unwrap() < 0.05).collect()
            })
            .collect();
        for k in 0..lag {
            let rate = rejections.iter().filter(|r| r[k]).count() as f64 / 500.0;
            assert!(
                (0.03..=0.07).contains(&rate),
                "portmanteau rejection rate at lag {} is {rate}",
                k + 1
            );
        }
    }

    #[test]
    fn portmanteau_statistic_is_nondecreasing() {
        let residuals = gaussian(400, 2, 5);
        let cov = autocovariances(&residuals, 8);
        let c0_inv = cov[0].clone().cholesky().unwrap().inverse();
        let m = 400f64;
        let mut q_values = Vec::new();
        let mut acc = 0.0;
        for (k, cov_k) in cov.iter().enumerate().skip(1) {
            acc += m * m / (m - k as f64)
                * (cov_k.transpose() * &c0_inv * cov_k * &c0_inv).trace();
            q_values.push(acc);
        }
        assert!(q_values.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn portmanteau_detects_ar1_residuals() {
        let detected = (0..100u64)
            .into_par_iter()
            .filter(|&seed| {
                let panel = ar1_panel(1000, 2, 0.5, 400_000 + seed);
                let p = portmanteau_test(&panel, 5, 0).unwrap();
                p[4].unwrap() < 0.01
            })
            .count();
        assert!(detected >= 99, "AR(1) residuals detected in only {detected}/100 seeds");
    }

    #[test]
    fn fitted_order_entries_are_not_applicable() {
        let residuals = gaussian(300, 2, 7);
        let p = portmanteau_test(&residuals, 6, 2).unwrap();
        assert!(p[0].is_none() && p[1].is_none());
        assert!(p[2..].iter().all(Option::is_some));
    }

    #[test]
    fn statistics_invariant_under_column_rescaling() {
        let residuals = gaussian(250, 3, 9);
        let mut scaled = residuals.clone();
        for (j, factor) in [3.0, 0.04, 17.0].iter().enumerate() {
            scaled.column_mut(j).scale_mut(*factor);
        }
        let ccm_a = ccm_significance(&residuals, 4).unwrap();
        let ccm_b = ccm_significance(&scaled, 4).unwrap();
        for (a, b) in ccm_a.iter().zip(&ccm_b) {
            assert!((a - b).abs() < 1e-10);
        }
        let q_a = portmanteau_test(&residuals, 4, 0).unwrap();
        let q_b = portmanteau_test(&scaled, 4, 0).unwrap();
        for (a, b) in q_a.iter().zip(&q_b) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn univariate_case_matches_scalar_formula() {
        let residuals = gaussian(300, 1, 11);
        let p_multi = portmanteau_test(&residuals, 6, 0).unwrap();
        // Scalar form with the same covariance convention:
        // Q_k = m² Σ (m-l)⁻¹ r_l².
        let m = 300f64;
        let mean = residuals.column(0).mean();
        let centered: Vec<f64> = residuals.column(0).iter().map(|v| v - mean).collect();
        let c0: f64 = centered.iter().map(|v| v * v).sum::<f64>() / m;
        let mut acc = 0.0;
        for k in 1..=6 {
            let ck: f64 = (0..300 - k).map(|t| centered[t] * centered[t + k]).sum::<f64>() / m;
            let r = ck / c0;
            acc += m * m / (m - k as f64) * r * r;
            let expected = chi_squared_sf(acc, k as f64);
            assert!((p_multi[k - 1].unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn whiteness_report_flags_adequacy() {
        let white = gaussian(500, 2, 13);
        let report = whiteness_report(&white, 8, 1).unwrap();
        assert_eq!(report.ccm_p_values.len(), 8);
        assert_eq!(report.portmanteau_p_values.len(), 8);
        let correlated = ar1_panel(500, 2, 0.5, 15);
        let bad = whiteness_report(&correlated, 8, 0).unwrap();
        assert!(!bad.adequate_first_5);
    }
}
