//! Granger causality analysis on score series: pairwise tests, the full
//! two-to-two causality matrix, partial causality given conditioning
//! variables, and transfer function models with autoregressive noise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{companion_spectral_radius, f_sf, ols};
use crate::var::ScoreSeries;

#[derive(Debug, Error)]
pub enum CausalityError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("cause and effect are the same variable `{0}`")]
    SameVariable(String),
    #[error("variable `{0}` appears in more than one role")]
    OverlappingRoles(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("no cause lags requested; nothing to test")]
    NothingToTest,
    #[error("at least two variables are needed, found {0}")]
    TooFewVariables(usize),
    #[error("estimated noise process is not stationary (AR root modulus {0:.4} >= 1)")]
    NonStationaryNoise(f64),
    #[error("collinear regressors in test regression")]
    CollinearRegressors,
    #[error(transparent)]
    Var(#[from] crate::var::VarError),
}

/// Outcome of a single Granger or partial-causality test. The statistic is
/// the F form of the restriction test.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GrangerResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df_num: usize,
    pub df_den: usize,
}

/// How the lag orders of each pairwise test are chosen.
#[derive(Debug, Clone)]
pub enum LagSelector {
    /// The stated (own, cause) lag pair for every test.
    Fixed { own_lags: usize, cause_lags: usize },
    /// Own-history is neutralized per effect variable by an AR order chosen
    /// with AIC (up to `max_own`); `cause_lags` lags of the cause are tested
    /// on top of that whitened regression.
    AicResiduals { max_own: usize, cause_lags: usize },
}

impl Default for LagSelector {
    fn default() -> Self {
        LagSelector::AicResiduals {
            max_own: 10,
            cause_lags: 2,
        }
    }
}

/// The two-to-two causality table: entry (row j', column j) is the p-value
/// that variable j Granger-causes variable j'. Diagonal entries are NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CausalityReportDto", into = "CausalityReportDto")]
pub struct CausalityReport {
    pub labels: Vec<String>,
    pub p_values: DMatrix<f64>,
    pub decisions: DMatrix<bool>,
    /// Own-lag order used for each effect variable.
    pub own_lags: Vec<usize>,
    pub cause_lags: usize,
    pub alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct CausalityReportDto {
    labels: Vec<String>,
    /// Row-major q×q matrix of p-values (NaN on the diagonal, encoded null).
    p_values: Vec<Option<f64>>,
    decisions: Vec<bool>,
    own_lags: Vec<usize>,
    cause_lags: usize,
    alpha: f64,
}

impl From<CausalityReport> for CausalityReportDto {
    fn from(r: CausalityReport) -> Self {
        CausalityReportDto {
            labels: r.labels,
            p_values: r
                .p_values
                .row_iter()
                .flat_map(|row| {
                    row.iter()
                        .map(|&v| if v.is_nan() { None } else { Some(v) })
                        .collect::<Vec<_>>()
                })
                .collect(),
            decisions: r
                .decisions
                .row_iter()
                .flat_map(|row| row.iter().cloned().collect::<Vec<_>>())
                .collect(),
            own_lags: r.own_lags,
            cause_lags: r.cause_lags,
            alpha: r.alpha,
        }
    }
}

impl TryFrom<CausalityReportDto> for CausalityReport {
    type Error = String;

    fn try_from(dto: CausalityReportDto) -> Result<Self, String> {
        let q = dto.labels.len();
        if dto.p_values.len() != q * q || dto.decisions.len() != q * q {
            return Err("matrix sizes do not match label count".into());
        }
        let flat: Vec<f64> = dto.p_values.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        Ok(CausalityReport {
            labels: dto.labels,
            p_values: DMatrix::from_row_slice(q, q, &flat),
            decisions: DMatrix::from_row_slice(q, q, &dto.decisions),
            own_lags: dto.own_lags,
            cause_lags: dto.cause_lags,
            alpha: dto.alpha,
        })
    }
}

impl CausalityReport {
    /// Plain-text arrow table: rows are effects, an arrow marks a significant
    /// cause in that column.
    pub fn render_arrow_table(&self) -> String {
        let width = self
            .labels
            .iter()
            .map(|l| l.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = String::new();
        out.push_str(&format!("{:width$}", ""));
        for label in &self.labels {
            out.push_str(&format!("  {label:width$}"));
        }
        out.push('\n');
        for (row, label) in self.labels.iter().enumerate() {
            out.push_str(&format!("{label:width$}"));
            for col in 0..self.labels.len() {
                let cell = if row != col && self.decisions[(row, col)] {
                    "<-"
                } else {
                    ""
                };
                out.push_str(&format!("  {cell:width$}"));
            }
            out.push('\n');
        }
        out
    }
}

fn column(series: &ScoreSeries, label: &str) -> Result<usize, CausalityError> {
    series
        .column_index(label)
        .ok_or_else(|| CausalityError::UnknownLabel(label.to_string()))
}

/// Restricted-vs-unrestricted F test that the `cause_lags` lags of every
/// column in `cause_cols` jointly carry no information about `effect_col`,
/// after `own_lags` lags of the effect and of every conditioning column.
fn lag_restriction_test(
    series: &ScoreSeries,
    effect_col: usize,
    conditioning_cols: &[usize],
    cause_cols: &[usize],
    own_lags: usize,
    cause_lags: usize,
) -> Result<GrangerResult, CausalityError> {
    if cause_lags == 0 || cause_cols.is_empty() {
        return Err(CausalityError::NothingToTest);
    }
    let n = series.len();
    let max_lag = own_lags.max(cause_lags);
    let rows = n.saturating_sub(max_lag);
    let restricted_k = own_lags * (1 + conditioning_cols.len());
    let tested_k = cause_lags * cause_cols.len();
    if rows <= restricted_k + tested_k + 1 {
        return Err(CausalityError::InsufficientData(format!(
            "{rows} usable observations for {} regressors",
            restricted_k + tested_k
        )));
    }

    let y = DVector::from_fn(rows, |r, _| series.values[(max_lag + r, effect_col)]);
    let mut x = DMatrix::zeros(rows, restricted_k + tested_k);
    for r in 0..rows {
        let i = max_lag + r;
        let mut c = 0;
        for l in 1..=own_lags {
            x[(r, c)] = series.values[(i - l, effect_col)];
            c += 1;
        }
        for &cond in conditioning_cols {
            for l in 1..=own_lags {
                x[(r, c)] = series.values[(i - l, cond)];
                c += 1;
            }
        }
        for &cause in cause_cols {
            for l in 1..=cause_lags {
                x[(r, c)] = series.values[(i - l, cause)];
                c += 1;
            }
        }
    }

    let restricted_rss = if restricted_k == 0 {
        y.dot(&y)
    } else {
        let x0 = x.columns(0, restricted_k).into_owned();
        ols(&x0, &y).ok_or(CausalityError::CollinearRegressors)?.rss
    };
    let full = ols(&x, &y).ok_or(CausalityError::CollinearRegressors)?;
    let df_num = tested_k;
    let df_den = rows - restricted_k - tested_k;
    let statistic = ((restricted_rss - full.rss) / df_num as f64)
        / (full.rss / df_den as f64).max(f64::MIN_POSITIVE);
    let statistic = statistic.max(0.0);
    let p_value = f_sf(statistic, df_num as f64, df_den as f64);
    Ok(GrangerResult {
        statistic,
        p_value,
        df_num,
        df_den,
    })
}

/// Tests whether `cause` Granger-causes `effect`: the effect is regressed on
/// `own_lags` of its own past plus `cause_lags` of the cause's past, and the
/// cause block is tested against zero with an F statistic.
pub fn granger_test(
    series: &ScoreSeries,
    cause: &str,
    effect: &str,
    own_lags: usize,
    cause_lags: usize,
) -> Result<GrangerResult, CausalityError> {
    if cause == effect {
        return Err(CausalityError::SameVariable(cause.to_string()));
    }
    let cause_col = column(series, cause)?;
    let effect_col = column(series, effect)?;
    lag_restriction_test(series, effect_col, &[], &[cause_col], own_lags, cause_lags)
}

/// Partial causality: the effect is regressed on its own past, the past of
/// every variable in `given`, and the cause's past; the Wald (F) test checks
/// the cause block. With an empty `given` this is exactly [`granger_test`].
pub fn partial_granger(
    series: &ScoreSeries,
    cause: &str,
    effect: &str,
    given: &[&str],
    own_lags: usize,
    cause_lags: usize,
) -> Result<GrangerResult, CausalityError> {
    if cause == effect {
        return Err(CausalityError::SameVariable(cause.to_string()));
    }
    if given.iter().any(|g| *g == cause || *g == effect) {
        let overlapping = given
            .iter()
            .find(|g| **g == cause || **g == effect)
            .unwrap();
        return Err(CausalityError::OverlappingRoles(overlapping.to_string()));
    }
    let cause_col = column(series, cause)?;
    let effect_col = column(series, effect)?;
    let conditioning: Vec<usize> = given
        .iter()
        .map(|g| column(series, g))
        .collect::<Result<_, _>>()?;
    lag_restriction_test(
        series,
        effect_col,
        &conditioning,
        &[cause_col],
        own_lags,
        cause_lags,
    )
}

/// AR order of one column selected by AIC on a common sample, whitening its
/// own history before cross-variable testing.
fn aic_own_order(series: &ScoreSeries, col: usize, max_own: usize) -> Result<usize, CausalityError> {
    let values = series.values.column(col).into_owned();
    let single = ScoreSeries::new(
        DMatrix::from_column_slice(values.len(), 1, values.as_slice()),
        vec![series.labels[col].clone()],
        "own-lag selection",
    );
    Ok(crate::var::select_order_aic(&single, max_own)?)
}

/// Runs [`granger_test`] over every ordered pair of variables. With the
/// default residual-style selector each effect's own order comes from a
/// univariate AR fit chosen by AIC, so its own history is neutralized before
/// the cause lags are tested.
pub fn causality_matrix(
    series: &ScoreSeries,
    selector: &LagSelector,
    alpha: f64,
) -> Result<CausalityReport, CausalityError> {
    let q = series.dimension();
    if q < 2 {
        return Err(CausalityError::TooFewVariables(q));
    }
    let (own_lags, cause_lags) = match selector {
        LagSelector::Fixed {
            own_lags,
            cause_lags,
        } => (vec![*own_lags; q], *cause_lags),
        LagSelector::AicResiduals {
            max_own,
            cause_lags,
        } => {
            let orders = (0..q)
                .map(|col| aic_own_order(series, col, *max_own))
                .collect::<Result<Vec<_>, _>>()?;
            (orders, *cause_lags)
        }
    };
    let pairs: Vec<(usize, usize)> = (0..q)
        .flat_map(|effect| (0..q).filter(move |&cause| cause != effect).map(move |c| (effect, c)))
        .collect();
    let results: Vec<((usize, usize), GrangerResult)> = pairs
        .par_iter()
        .map(|&(effect, cause)| {
            lag_restriction_test(series, effect, &[], &[cause], own_lags[effect], cause_lags)
                .map(|r| ((effect, cause), r))
        })
        .collect::<Result<_, _>>()?;
    let mut p_values = DMatrix::from_element(q, q, f64::NAN);
    let mut decisions = DMatrix::from_element(q, q, false);
    for ((effect, cause), result) in results {
        p_values[(effect, cause)] = result.p_value;
        decisions[(effect, cause)] = result.p_value < alpha;
    }
    Ok(CausalityReport {
        labels: series.labels.clone(),
        p_values,
        decisions,
        own_lags,
        cause_lags,
        alpha,
    })
}

/// Refines a pairwise causality table with partial tests: every significant
/// arrow is re-tested conditioning on the effect's other significant causes,
/// and arrows that lose significance are dropped. Effects with fewer than two
/// marginal causes keep their pairwise entries. Own and conditioning lags are
/// raised to at least the cause-lag count so the conditioning set can absorb
/// shared-driver structure.
pub fn partial_refinement(
    series: &ScoreSeries,
    report: &CausalityReport,
) -> Result<CausalityReport, CausalityError> {
    let q = report.labels.len();
    let mut p_values = report.p_values.clone();
    let mut decisions = report.decisions.clone();
    for effect in 0..q {
        let causes: Vec<usize> = (0..q)
            .filter(|&c| c != effect && report.decisions[(effect, c)])
            .collect();
        if causes.len() < 2 {
            continue;
        }
        let own = report.own_lags[effect].max(report.cause_lags);
        for &cause in &causes {
            let given: Vec<&str> = causes
                .iter()
                .filter(|&&g| g != cause)
                .map(|&g| report.labels[g].as_str())
                .collect();
            let result = partial_granger(
                series,
                &report.labels[cause],
                &report.labels[effect],
                &given,
                own,
                report.cause_lags,
            )?;
            p_values[(effect, cause)] = result.p_value;
            decisions[(effect, cause)] = result.p_value < report.alpha;
        }
    }
    Ok(CausalityReport {
        labels: report.labels.clone(),
        p_values,
        decisions,
        own_lags: report.own_lags.clone(),
        cause_lags: report.cause_lags,
        alpha: report.alpha,
    })
}

/// One input series of a transfer function model together with the lags at
/// which it enters (lag 0 is the contemporaneous value).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferInput {
    pub label: String,
    pub lags: Vec<usize>,
}

/// A fitted transfer function model: finite distributed input lags plus an
/// AR noise process, estimated by iterated generalized least squares.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferFunctionModel {
    pub output_label: String,
    pub inputs: Vec<TransferInput>,
    /// Coefficients in the order the (input, lag) pairs were given.
    pub input_coefficients: Vec<f64>,
    pub intercept: f64,
    pub noise_ar_order: usize,
    pub noise_ar_coefficients: Vec<f64>,
    /// Innovation variance of the whitened noise.
    pub residual_variance: f64,
    pub iterations: usize,
}

/// Fits an AR model to a noise series by least squares without intercept.
fn fit_noise_ar(noise: &[f64], order: usize) -> Result<Vec<f64>, CausalityError> {
    if order == 0 {
        return Ok(Vec::new());
    }
    let rows = noise.len().saturating_sub(order);
    if rows <= order {
        return Err(CausalityError::InsufficientData(
            "noise series too short for the AR order".into(),
        ));
    }
    let y = DVector::from_fn(rows, |r, _| noise[order + r]);
    let x = DMatrix::from_fn(rows, order, |r, c| noise[order + r - c - 1]);
    let fit = ols(&x, &y).ok_or(CausalityError::CollinearRegressors)?;
    let coefficients: Vec<f64> = fit.coefficients.iter().cloned().collect();
    // Stationarity of the AR polynomial via its companion form.
    let lag_matrices: Vec<DMatrix<f64>> = coefficients
        .iter()
        .map(|&a| DMatrix::from_element(1, 1, a))
        .collect();
    let radius = companion_spectral_radius(&lag_matrices);
    if radius >= 1.0 {
        return Err(CausalityError::NonStationaryNoise(radius));
    }
    Ok(coefficients)
}

/// Two-stage transfer function estimation: OLS of the output on intercept and
/// input lags, an AR fit to the residuals, then iterated re-estimation on
/// AR-filtered variables until the input coefficients converge.
pub fn fit_transfer_function(
    series: &ScoreSeries,
    output: &str,
    inputs: &[TransferInput],
    noise_ar_order: usize,
) -> Result<TransferFunctionModel, CausalityError> {
    let output_col = column(series, output)?;
    let mut input_cols = Vec::new();
    for input in inputs {
        if input.label == output {
            return Err(CausalityError::OverlappingRoles(input.label.clone()));
        }
        if input.lags.is_empty() {
            return Err(CausalityError::NothingToTest);
        }
        input_cols.push(column(series, &input.label)?);
    }
    let n = series.len();
    let max_lag = inputs
        .iter()
        .flat_map(|i| i.lags.iter().cloned())
        .max()
        .unwrap_or(0);
    let rows = n.saturating_sub(max_lag);
    let k: usize = inputs.iter().map(|i| i.lags.len()).sum();
    // At least five observations per parameter (input lags, AR coefficients,
    // and the intercept).
    if (k + noise_ar_order + 1) * 5 >= rows {
        return Err(CausalityError::InsufficientData(format!(
            "{rows} usable observations for {} parameters",
            k + noise_ar_order + 1
        )));
    }

    // Raw regressor panel: intercept column last.
    let y = DVector::from_fn(rows, |r, _| series.values[(max_lag + r, output_col)]);
    let mut x = DMatrix::zeros(rows, k + 1);
    for r in 0..rows {
        let i = max_lag + r;
        let mut c = 0;
        for (input, &col) in inputs.iter().zip(&input_cols) {
            for &lag in &input.lags {
                x[(r, c)] = series.values[(i - lag, col)];
                c += 1;
            }
        }
        x[(r, k)] = 1.0;
    }

    let stage1 = ols(&x, &y).ok_or(CausalityError::CollinearRegressors)?;
    let mut beta = stage1.coefficients.clone();
    let mut ar = fit_noise_ar(stage1.residuals.as_slice(), noise_ar_order)?;
    let mut iterations = 0;

    if noise_ar_order > 0 {
        for round in 1..=50 {
            iterations = round;
            // Filter both sides by (1 - a_1 B - ... - a_r B^r).
            let r0 = noise_ar_order;
            let frows = rows - r0;
            let filter = |col: &dyn Fn(usize) -> f64, r: usize| -> f64 {
                let mut v = col(r + r0);
                for (j, &a) in ar.iter().enumerate() {
                    v -= a * col(r + r0 - j - 1);
                }
                v
            };
            let yf = DVector::from_fn(frows, |r, _| filter(&|i| y[i], r));
            let xf = DMatrix::from_fn(frows, k + 1, |r, c| filter(&|i| x[(i, c)], r));
            let stage = ols(&xf, &yf).ok_or(CausalityError::CollinearRegressors)?;
            let delta = (&stage.coefficients - &beta).abs().max();
            beta = stage.coefficients;
            // Noise is re-extracted from the unfiltered equation.
            let noise = &y - &x * &beta;
            ar = fit_noise_ar(noise.as_slice(), noise_ar_order)?;
            if delta < 1e-8 {
                break;
            }
        }
    }

    let noise = &y - &x * &beta;
    let residual_variance = if noise_ar_order == 0 {
        noise.dot(&noise) / (rows - k - 1) as f64
    } else {
        let r0 = noise_ar_order;
        let mut ss = 0.0;
        for i in r0..rows {
            let mut e = noise[i];
            for (j, &a) in ar.iter().enumerate() {
                e -= a * noise[i - j - 1];
            }
            ss += e * e;
        }
        ss / (rows - r0) as f64
    };

    Ok(TransferFunctionModel {
        output_label: output.to_string(),
        inputs: inputs.to_vec(),
        input_coefficients: beta.iter().take(k).cloned().collect(),
        intercept: beta[k],
        noise_ar_order,
        noise_ar_coefficients: ar,
        residual_variance,
        iterations,
    })
}
