//! Vector autoregression on principal component score series: per-equation
//! OLS estimation, AIC order selection on a common sample, t-threshold
//! pruning with restricted refits, residuals, and multi-step prediction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::ols;

pub use crate::stats::companion_spectral_radius;

#[derive(Debug, Error)]
pub enum VarError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("collinear regressors in equation for `{0}`")]
    CollinearRegressors(String),
    #[error("history has {found} rows but the model needs {needed}")]
    ShortHistory { needed: usize, found: usize },
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
}

/// A q-dimensional score series: row i holds the score vector of cycle i.
/// Scores produced by FPCA are exactly centered, so models carry no
/// intercept by default.
#[derive(Debug, Clone)]
pub struct ScoreSeries {
    pub values: DMatrix<f64>,
    pub labels: Vec<String>,
    pub origin: String,
}

impl ScoreSeries {
    pub fn new(values: DMatrix<f64>, labels: Vec<String>, origin: impl Into<String>) -> Self {
        assert_eq!(
            values.ncols(),
            labels.len(),
            "one label per score column is required"
        );
        ScoreSeries {
            values,
            labels,
            origin: origin.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dimension(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// A fitted VAR(p): coefficient matrices Ω_1..Ω_p, the boolean mask of free
/// coefficients (false entries are constrained to zero), and the residual
/// covariance with divisor n_effective.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VarModelDto", into = "VarModelDto")]
pub struct VarModel {
    pub order: usize,
    pub coefficients: Vec<DMatrix<f64>>,
    pub mask: Vec<DMatrix<bool>>,
    pub intercept: DVector<f64>,
    pub residual_covariance: DMatrix<f64>,
    pub n_effective: usize,
    pub labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VarModelDto {
    p: usize,
    labels: Vec<String>,
    /// One row-major q×q matrix per lag.
    omega: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
    /// Row-major q×q residual covariance.
    sigma: Vec<f64>,
    n_effective: usize,
    intercept: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter()
        .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
        .collect()
}

impl From<VarModel> for VarModelDto {
    fn from(m: VarModel) -> Self {
        VarModelDto {
            p: m.order,
            labels: m.labels,
            omega: m.coefficients.iter().map(row_major).collect(),
            mask: m
                .mask
                .iter()
                .map(|mk| {
                    mk.row_iter()
                        .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
                        .collect()
                })
                .collect(),
            sigma: row_major(&m.residual_covariance),
            n_effective: m.n_effective,
            intercept: m.intercept.iter().cloned().collect(),
        }
    }
}

impl TryFrom<VarModelDto> for VarModel {
    type Error = String;

    fn try_from(dto: VarModelDto) -> Result<Self, String> {
        let q = dto.labels.len();
        if dto.omega.len() != dto.p || dto.mask.len() != dto.p {
            return Err("lag count does not match order".into());
        }
        if dto.sigma.len() != q * q || dto.intercept.len() != q {
            return Err("covariance or intercept has wrong size".into());
        }
        let coefficients = dto
            .omega
            .iter()
            .map(|m| {
                if m.len() != q * q {
                    Err("coefficient matrix has wrong size".to_string())
                } else {
                    Ok(DMatrix::from_row_slice(q, q, m))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mask = dto
            .mask
            .iter()
            .map(|m| {
                if m.len() != q * q {
                    Err("mask matrix has wrong size".to_string())
                } else {
                    Ok(DMatrix::from_row_slice(q, q, m))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(VarModel {
            order: dto.p,
            coefficients,
            mask,
            intercept: DVector::from_column_slice(&dto.intercept),
            residual_covariance: DMatrix::from_row_slice(q, q, &dto.sigma),
            n_effective: dto.n_effective,
            labels: dto.labels,
        })
    }
}

fn full_mask(q: usize, p: usize) -> Vec<DMatrix<bool>> {
    (0..p).map(|_| DMatrix::from_element(q, q, true)).collect()
}

/// Per-equation t statistics of the free coefficients, laid out like the
/// coefficient matrices (masked-out entries are NaN).
struct FitInternals {
    model: VarModel,
    t_stats: Vec<DMatrix<f64>>,
}

/// Fits on the rows `skip..n`; `skip >= p` so every target has a full lag
/// window. Order selection passes `skip = p_max` so all candidates share one
/// sample.
fn fit_window(
    series: &ScoreSeries,
    p: usize,
    skip: usize,
    mask: &[DMatrix<bool>],
    with_intercept: bool,
) -> Result<FitInternals, VarError> {
    let n = series.len();
    let q = series.dimension();
    assert!(skip >= p);
    if mask.len() != p || mask.iter().any(|m| m.nrows() != q || m.ncols() != q) {
        return Err(VarError::InvalidMask(format!(
            "expected {p} boolean {q}x{q} matrices"
        )));
    }
    let rows = n.saturating_sub(skip);
    if rows == 0 {
        return Err(VarError::InsufficientData(format!(
            "no target rows left after skipping {skip} of {n}"
        )));
    }

    let mut coefficients: Vec<DMatrix<f64>> = (0..p).map(|_| DMatrix::zeros(q, q)).collect();
    let mut t_stats: Vec<DMatrix<f64>> =
        (0..p).map(|_| DMatrix::from_element(q, q, f64::NAN)).collect();
    let mut intercept = DVector::zeros(q);
    let mut residual_matrix = DMatrix::zeros(rows, q);

    for eq in 0..q {
        // Active regressors of this equation: (lag k, source column l).
        let mut active: Vec<(usize, usize)> = Vec::new();
        for (k, mk) in mask.iter().enumerate() {
            for l in 0..q {
                if mk[(eq, l)] {
                    active.push((k, l));
                }
            }
        }
        let n_regressors = active.len() + usize::from(with_intercept);
        if n_regressors >= rows {
            return Err(VarError::InsufficientData(format!(
                "{rows} observations for {n_regressors} regressors in equation `{}`",
                series.labels[eq]
            )));
        }
        let y = DVector::from_fn(rows, |r, _| series.values[(skip + r, eq)]);
        if n_regressors == 0 {
            residual_matrix.column_mut(eq).copy_from(&y);
            continue;
        }
        let mut x = DMatrix::zeros(rows, n_regressors);
        for r in 0..rows {
            let i = skip + r;
            for (c, &(k, l)) in active.iter().enumerate() {
                x[(r, c)] = series.values[(i - k - 1, l)];
            }
            if with_intercept {
                x[(r, n_regressors - 1)] = 1.0;
            }
        }
        let fit = ols(&x, &y)
            .ok_or_else(|| VarError::CollinearRegressors(series.labels[eq].clone()))?;
        let dof = rows as f64 - n_regressors as f64;
        let sigma2 = if dof > 0.0 { fit.rss / dof } else { f64::NAN };
        for (c, &(k, l)) in active.iter().enumerate() {
            coefficients[k][(eq, l)] = fit.coefficients[c];
            let se = (sigma2 * fit.xtx_inv_diag[c]).sqrt();
            t_stats[k][(eq, l)] = if se > 0.0 {
                fit.coefficients[c] / se
            } else {
                f64::INFINITY
            };
        }
        if with_intercept {
            intercept[eq] = fit.coefficients[n_regressors - 1];
        }
        residual_matrix.column_mut(eq).copy_from(&fit.residuals);
    }

    let residual_covariance = residual_matrix.transpose() * &residual_matrix / rows as f64;
    Ok(FitInternals {
        model: VarModel {
            order: p,
            coefficients,
            mask: mask.to_vec(),
            intercept,
            residual_covariance,
            n_effective: rows,
            labels: series.labels.clone(),
        },
        t_stats,
    })
}

/// Per-equation OLS fit of a VAR(p) without intercept (scores are centered).
/// An optional mask constrains coefficients to zero; `p = 0` returns the
/// trivial model whose predictions are identically zero.
pub fn fit_var(
    series: &ScoreSeries,
    p: usize,
    mask: Option<&[DMatrix<bool>]>,
) -> Result<VarModel, VarError> {
    fit_var_with_options(series, p, mask, false)
}

/// Same as [`fit_var`] with an optional intercept for non-score series.
pub fn fit_var_with_options(
    series: &ScoreSeries,
    p: usize,
    mask: Option<&[DMatrix<bool>]>,
    with_intercept: bool,
) -> Result<VarModel, VarError> {
    let q = series.dimension();
    let owned;
    let mask = match mask {
        Some(m) => m,
        None => {
            owned = full_mask(q, p);
            &owned
        }
    };
    Ok(fit_window(series, p, p, mask, with_intercept)?.model)
}

/// In-sample AIC order selection: every candidate order 0..=p_max is fitted
/// on the common rows p_max..n so the criteria are comparable, with
/// AIC(p) = ln det Σ̂(p) + 2·p·q²/(n − p_max). Ties break toward smaller p.
pub fn select_order_aic(series: &ScoreSeries, p_max: usize) -> Result<usize, VarError> {
    let n = series.len();
    let q = series.dimension();
    let rows = n
        .checked_sub(p_max)
        .filter(|&r| r > p_max * q + 1)
        .ok_or_else(|| {
            VarError::InsufficientData(format!(
                "{n} observations cannot support order selection up to {p_max}"
            ))
        })?;
    let mut best_p = 0;
    let mut best_aic = f64::INFINITY;
    for p in 0..=p_max {
        let fit = fit_window(series, p, p_max, &full_mask(q, p), false)?;
        let log_det = match fit.model.residual_covariance.clone().cholesky() {
            Some(chol) => 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            None => continue,
        };
        let penalty = 2.0 * (p * q * q) as f64 / rows as f64;
        let aic = log_det + penalty;
        if aic < best_aic {
            best_aic = aic;
            best_p = p;
        }
    }
    if best_aic.is_infinite() {
        return Err(VarError::InsufficientData(
            "no candidate order produced a positive-definite residual covariance".into(),
        ));
    }
    Ok(best_p)
}

/// Iteratively zeroes coefficients with |t| below `threshold` and refits the
/// restricted model until the mask is stable (at most 20 rounds). A fully
/// pruned model is valid: it predicts zero everywhere.
pub fn prune_coefficients(
    series: &ScoreSeries,
    model: &VarModel,
    threshold: f64,
) -> Result<VarModel, VarError> {
    if series.labels != model.labels {
        return Err(VarError::LabelMismatch(
            "series labels differ from the fitted model".into(),
        ));
    }
    let p = model.order;
    let mut mask = model.mask.clone();
    let mut fit = fit_window(series, p, p, &mask, false)?;
    for _ in 0..20 {
        let mut changed = false;
        let mut next_mask = mask.clone();
        for k in 0..p {
            for eq in 0..model.labels.len() {
                for l in 0..model.labels.len() {
                    if mask[k][(eq, l)] && fit.t_stats[k][(eq, l)].abs() < threshold {
                        next_mask[k][(eq, l)] = false;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
        mask = next_mask;
        fit = fit_window(series, p, p, &mask, false)?;
    }
    Ok(fit.model)
}

/// Iterated forecasts: the one-step rule ξ̂ = Σ Ω_k ξ_{t-k} applied `horizon`
/// times, feeding each prediction back as history.
pub fn predict_var(
    model: &VarModel,
    history: &DMatrix<f64>,
    horizon: usize,
) -> Result<DMatrix<f64>, VarError> {
    let q = model.labels.len();
    if history.ncols() != q {
        return Err(VarError::LabelMismatch(format!(
            "history has {} columns, model has {q}",
            history.ncols()
        )));
    }
    if history.nrows() < model.order {
        return Err(VarError::ShortHistory {
            needed: model.order,
            found: history.nrows(),
        });
    }
    let mut window: Vec<DVector<f64>> = (history.nrows() - model.order..history.nrows())
        .map(|i| history.row(i).transpose())
        .collect();
    let mut out = DMatrix::zeros(horizon, q);
    for step in 0..horizon {
        let mut next = model.intercept.clone();
        for (k, omega) in model.coefficients.iter().enumerate() {
            // window holds the last p values, most recent last.
            let lagged = &window[window.len() - 1 - k];
            next += omega * lagged;
        }
        out.row_mut(step).copy_from(&next.transpose());
        if model.order > 0 {
            window.remove(0);
            window.push(next);
        }
    }
    Ok(out)
}

/// One-step in-sample residuals ε̂_i = ξ_i − Σ Ω_k ξ_{i−k} for i = p..n.
pub fn residuals(model: &VarModel, series: &ScoreSeries) -> Result<DMatrix<f64>, VarError> {
    if series.labels != model.labels {
        return Err(VarError::LabelMismatch(
            "series labels differ from the fitted model".into(),
        ));
    }
    let n = series.len();
    let q = series.dimension();
    let p = model.order;
    if n <= p {
        return Err(VarError::ShortHistory { needed: p + 1, found: n });
    }
    let mut out = DMatrix::zeros(n - p, q);
    for i in p..n {
        let mut fitted = model.intercept.clone();
        for (k, omega) in model.coefficients.iter().enumerate() {
            fitted += omega * series.values.row(i - k - 1).transpose();
        }
        let err = series.values.row(i).transpose() - fitted;
        out.row_mut(i - p).copy_from(&err.transpose());
    }
    Ok(out)
}

/// Simulates a VAR path from Gaussian innovations with covariance
/// `innovation_covariance`, discarding `burn_in` initial steps.
pub fn simulate_var<R: rand::Rng>(
    coefficients: &[DMatrix<f64>],
    innovation_covariance: &DMatrix<f64>,
    n: usize,
    burn_in: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let q = innovation_covariance.nrows();
    let chol = innovation_covariance
        .clone()
        .cholesky()
        .expect("innovation covariance must be positive definite")
        .l();
    let total = n + burn_in;
    let mut values = DMatrix::zeros(total, q);
    for i in 0..total {
        let z = DVector::from_fn(q, |_, _| StandardNormal.sample(rng));
        let mut x = &chol * z;
        for (k, omega) in coefficients.iter().enumerate() {
            if i > k {
                x += omega * values.row(i - k - 1).transpose();
            }
        }
        values.row_mut(i).copy_from(&x.transpose());
    }
    values.rows(burn_in, n).into_owned()
}
