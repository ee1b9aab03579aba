//! End-to-end forecasting pipelines: train/test splitting, FPCA + VAR
//! fitting in either the per-process or the joint layout, curve-level
//! prediction through the truncated expansion, operator-kernel evaluation,
//! and integrated squared error scoring.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::FunctionalSample;
use crate::fpca::{choose_q, fpca_multivariate, fpca_univariate, FpcaError, PcaModel};
use crate::var::{
    fit_var, predict_var, prune_coefficients, select_order_aic, ScoreSeries, VarError, VarModel,
};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("holdout {holdout} does not leave a training set for {n} cycles")]
    HoldoutTooLarge { holdout: usize, n: usize },
    #[error("samples are misaligned: {0}")]
    Misaligned(String),
    #[error("grids do not match: {0}")]
    GridMismatch(String),
    #[error("lag {k} out of range for a model of order {p}")]
    LagOutOfRange { k: usize, p: usize },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error(transparent)]
    Var(#[from] VarError),
    #[error(transparent)]
    Basis(#[from] crate::basis::BasisError),
}

/// Which score layout drives the VAR: one FPCA per process with stacked
/// scores, or a single multivariate FPCA with joint scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    Univariate,
    Multivariate,
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Approach::Univariate => write!(f, "univariate"),
            Approach::Multivariate => write!(f, "multivariate"),
        }
    }
}

/// Tuning knobs of [`fit_pipeline`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub variance_threshold: f64,
    pub p_max: usize,
    pub prune_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            variance_threshold: 0.95,
            p_max: 10,
            prune_threshold: 1.96,
        }
    }
}

/// Everything needed to map score forecasts back to curves: the fitted PCA
/// model(s), the per-process component counts, and the pruned VAR on the
/// stacked (univariate) or joint (multivariate) score vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastBundle {
    pub approach: Approach,
    pub pca: Vec<PcaModel>,
    pub q: Vec<usize>,
    pub var: VarModel,
    pub train_cycles: (u64, u64),
}

/// Forecast-only output: one value matrix (horizon × grid length) per process.
#[derive(Debug, Clone)]
pub struct PredictedCurves {
    pub grid: Vec<f64>,
    pub labels: Vec<String>,
    pub values: Vec<DMatrix<f64>>,
}

/// How test-sample forecasts use the observed past.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Each step conditions on the observed test curves before it (their
    /// scores under the trained eigenbasis).
    OneStepAhead,
    /// Pure iterated forecasting from the end of the training sample.
    Iterated,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::OneStepAhead => write!(f, "one-step-ahead"),
            EvalMode::Iterated => write!(f, "iterated"),
        }
    }
}

/// IMSE of one test curve under one process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImseRecord {
    pub cycle: u64,
    pub process: String,
    pub imse: f64,
}

/// Forecasts evaluated against observed test curves.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub mode: EvalMode,
    pub grid: Vec<f64>,
    pub labels: Vec<String>,
    pub cycle_indices: Vec<u64>,
    pub predicted: Vec<DMatrix<f64>>,
    pub actual: Vec<DMatrix<f64>>,
    pub imse: Vec<ImseRecord>,
}

/// `count` equispaced points on [0, 1].
pub fn uniform_grid(count: usize) -> Vec<f64> {
    assert!(count >= 2);
    (0..count).map(|i| i as f64 / (count - 1) as f64).collect()
}

fn check_alignment(samples: &[FunctionalSample]) -> Result<(), ForecastError> {
    if samples.is_empty() {
        return Err(ForecastError::Misaligned("no samples given".into()));
    }
    for s in samples.iter().skip(1) {
        if s.cycle_indices != samples[0].cycle_indices {
            return Err(ForecastError::Misaligned(format!(
                "sample `{}` covers different cycles than `{}`",
                s.label, samples[0].label
            )));
        }
    }
    Ok(())
}

/// Splits every process at the same point: the last `holdout` cycles form
/// the test set.
pub fn split_train_test(
    samples: &[FunctionalSample],
    holdout: usize,
) -> Result<(Vec<FunctionalSample>, Vec<FunctionalSample>), ForecastError> {
    check_alignment(samples)?;
    let n = samples[0].len();
    if holdout >= n {
        return Err(ForecastError::HoldoutTooLarge { holdout, n });
    }
    let cut = samples[0].cycle_indices[n - holdout.min(n)..].to_vec();
    let train: Vec<FunctionalSample> = samples
        .iter()
        .map(|s| s.filter_cycles(|c| !cut.contains(&c)))
        .collect::<Result<_, _>>()?;
    let test: Vec<FunctionalSample> = if holdout == 0 {
        Vec::new()
    } else {
        samples
            .iter()
            .map(|s| s.filter_cycles(|c| cut.contains(&c)))
            .collect::<Result<_, _>>()?
    };
    Ok((train, test))
}

/// Score-column label for component j of a process: the process initial in
/// upper case followed by PC and the 1-based index (reset -> RPC1).
fn score_label(process: &str, j: usize, unique_initial: bool) -> String {
    let initial = process
        .chars()
        .find(|c| c.is_alphabetic())
        .map(|c| c.to_ascii_uppercase())
        .unwrap_or('X');
    if unique_initial {
        format!("{initial}PC{}", j + 1)
    } else {
        format!("{}PC{}", process.to_uppercase(), j + 1)
    }
}

fn initials_unique(samples: &[FunctionalSample]) -> bool {
    let mut initials: Vec<char> = samples
        .iter()
        .map(|s| {
            s.label
                .chars()
                .find(|c| c.is_alphabetic())
                .map(|c| c.to_ascii_uppercase())
                .unwrap_or('X')
        })
        .collect();
    initials.sort_unstable();
    initials.dedup();
    initials.len() == samples.len()
}

/// Fits the full pipeline on training samples: FPCA per the chosen approach,
/// component selection at the variance threshold, AIC order selection, a VAR
/// fit, and t-threshold pruning.
pub fn fit_pipeline(
    train: &[FunctionalSample],
    approach: Approach,
    config: &FitConfig,
) -> Result<ForecastBundle, ForecastError> {
    check_alignment(train)?;
    let (pca, q, series) = match approach {
        Approach::Univariate => {
            let unique = initials_unique(train);
            let mut models = Vec::with_capacity(train.len());
            let mut qs = Vec::with_capacity(train.len());
            let mut labels = Vec::new();
            for sample in train {
                let model = fpca_univariate(sample)?;
                let q_h = choose_q(&model.eigenvalues, config.variance_threshold)?;
                for j in 0..q_h {
                    labels.push(score_label(&sample.label, j, unique));
                }
                qs.push(q_h);
                models.push(model);
            }
            let n = train[0].len();
            let total_q: usize = qs.iter().sum();
            let mut values = DMatrix::zeros(n, total_q);
            let mut offset = 0;
            for (model, &q_h) in models.iter().zip(&qs) {
                values
                    .view_mut((0, offset), (n, q_h))
                    .copy_from(&model.scores.columns(0, q_h));
                offset += q_h;
            }
            let series = ScoreSeries::new(values, labels, "stacked per-process scores");
            (models, qs, series)
        }
        Approach::Multivariate => {
            let model = fpca_multivariate(train)?;
            let q = choose_q(&model.eigenvalues, config.variance_threshold)?;
            let labels = (0..q).map(|j| format!("MPC{}", j + 1)).collect();
            let values = model.scores.columns(0, q).into_owned();
            let series = ScoreSeries::new(values, labels, "joint multivariate scores");
            (vec![model], vec![q], series)
        }
    };
    let p = select_order_aic(&series, config.p_max)?;
    let fitted = fit_var(&series, p, None)?;
    let var = prune_coefficients(&series, &fitted, config.prune_threshold)?;
    let cycles = &train[0].cycle_indices;
    Ok(ForecastBundle {
        approach,
        pca,
        q,
        var,
        train_cycles: (cycles[0], *cycles.last().unwrap()),
    })
}

impl ForecastBundle {
    pub fn process_labels(&self) -> Vec<String> {
        match self.approach {
            Approach::Univariate => self.pca.iter().map(|m| m.blocks[0].label.clone()).collect(),
            Approach::Multivariate => {
                self.pca[0].blocks.iter().map(|b| b.label.clone()).collect()
            }
        }
    }

    /// The training score history in the layout the VAR was fitted on.
    pub fn score_history(&self) -> DMatrix<f64> {
        match self.approach {
            Approach::Univariate => {
                let n = self.pca[0].n();
                let total_q: usize = self.q.iter().sum();
                let mut values = DMatrix::zeros(n, total_q);
                let mut offset = 0;
                for (model, &q_h) in self.pca.iter().zip(&self.q) {
                    values
                        .view_mut((0, offset), (n, q_h))
                        .copy_from(&model.scores.columns(0, q_h));
                    offset += q_h;
                }
                values
            }
            Approach::Multivariate => self.pca[0].scores.columns(0, self.q[0]).into_owned(),
        }
    }

    /// Projects observed curves onto the trained eigenbasis, producing score
    /// rows in the same layout as [`Self::score_history`].
    pub fn project_scores(&self, samples: &[FunctionalSample]) -> Result<DMatrix<f64>, ForecastError> {
        check_alignment(samples)?;
        match self.approach {
            Approach::Univariate => {
                if samples.len() != self.pca.len() {
                    return Err(ForecastError::Misaligned(format!(
                        "{} samples for {} fitted processes",
                        samples.len(),
                        self.pca.len()
                    )));
                }
                let n = samples[0].len();
                let total_q: usize = self.q.iter().sum();
                let mut values = DMatrix::zeros(n, total_q);
                let mut offset = 0;
                for ((model, &q_h), sample) in self.pca.iter().zip(&self.q).zip(samples) {
                    let scores = model.project(std::slice::from_ref(sample), q_h)?;
                    values.view_mut((0, offset), (n, q_h)).copy_from(&scores);
                    offset += q_h;
                }
                Ok(values)
            }
            Approach::Multivariate => Ok(self.pca[0].project(samples, self.q[0])?),
        }
    }

    /// Maps score rows (one per forecast step) through the truncated
    /// expansion and evaluates the curves on `grid`.
    fn curves_on_grid(
        &self,
        scores: &DMatrix<f64>,
        grid: &[f64],
    ) -> Result<Vec<DMatrix<f64>>, ForecastError> {
        match self.approach {
            Approach::Univariate => {
                let mut out = Vec::with_capacity(self.pca.len());
                let mut offset = 0;
                for (model, &q_h) in self.pca.iter().zip(&self.q) {
                    let block = scores.columns(offset, q_h).into_owned();
                    let samples = model.curves_from_scores(&block)?;
                    out.push(samples[0].evaluate_on_grid(grid)?);
                    offset += q_h;
                }
                Ok(out)
            }
            Approach::Multivariate => {
                let samples = self.pca[0].curves_from_scores(scores)?;
                samples
                    .iter()
                    .map(|s| s.evaluate_on_grid(grid).map_err(ForecastError::from))
                    .collect()
            }
        }
    }

    /// Mean function of every process evaluated on `grid`.
    pub fn mean_curves(&self, grid: &[f64]) -> Result<Vec<DVector<f64>>, ForecastError> {
        let zero = DMatrix::zeros(1, self.var.labels.len());
        let curves = self.curves_on_grid(&zero, grid)?;
        Ok(curves.into_iter().map(|m| m.row(0).transpose()).collect())
    }

    /// The eigenfunction value matrix F(t): one row per process, one column
    /// per retained score coordinate. In the univariate layout the blocks of
    /// different processes occupy disjoint column ranges.
    pub fn eigenfunction_matrix(&self, t: f64) -> Result<DMatrix<f64>, ForecastError> {
        match self.approach {
            Approach::Univariate => {
                let h = self.pca.len();
                let total_q: usize = self.q.iter().sum();
                let mut f = DMatrix::zeros(h, total_q);
                let mut offset = 0;
                for (row, (model, &q_h)) in self.pca.iter().zip(&self.q).enumerate() {
                    let values = model.vector_eigenfunction_values(t, q_h)?;
                    f.view_mut((row, offset), (1, q_h)).copy_from(&values);
                    offset += q_h;
                }
                Ok(f)
            }
            Approach::Multivariate => {
                Ok(self.pca[0].vector_eigenfunction_values(t, self.q[0])?)
            }
        }
    }
}

/// Iterated curve forecasts `horizon` steps past the training sample.
pub fn forecast_curves(
    bundle: &ForecastBundle,
    horizon: usize,
    grid: &[f64],
) -> Result<PredictedCurves, ForecastError> {
    if horizon == 0 {
        return Err(ForecastError::ZeroHorizon);
    }
    let history = bundle.score_history();
    let scores = predict_var(&bundle.var, &history, horizon)?;
    let values = bundle.curves_on_grid(&scores, grid)?;
    Ok(PredictedCurves {
        grid: grid.to_vec(),
        labels: bundle.process_labels(),
        values,
    })
}

/// Integrated squared difference ∫(predicted - actual)² dt by the trapezoid
/// rule on the evaluation grid.
pub fn imse(grid: &[f64], predicted: &[f64], actual: &[f64]) -> Result<f64, ForecastError> {
    if grid.len() != predicted.len() || grid.len() != actual.len() {
        return Err(ForecastError::GridMismatch(format!(
            "lengths {}, {}, {}",
            grid.len(),
            predicted.len(),
            actual.len()
        )));
    }
    if grid.len() < 2 {
        return Err(ForecastError::GridMismatch(
            "need at least two grid points".into(),
        ));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ForecastError::GridMismatch(
            "grid must be strictly increasing".into(),
        ));
    }
    let mut total = 0.0;
    for i in 1..grid.len() {
        let d0 = predicted[i - 1] - actual[i - 1];
        let d1 = predicted[i] - actual[i];
        total += 0.5 * (d0 * d0 + d1 * d1) * (grid[i] - grid[i - 1]);
    }
    Ok(total)
}

/// Forecasts the test cycles and scores them by IMSE against the observed
/// curves. In one-step-ahead mode each step conditions on the observed test
/// scores before it; in iterated mode only training data is used.
pub fn evaluate_forecast(
    bundle: &ForecastBundle,
    test: &[FunctionalSample],
    grid: &[f64],
    mode: EvalMode,
) -> Result<ForecastResult, ForecastError> {
    check_alignment(test)?;
    let horizon = test[0].len();
    let predicted_scores = match mode {
        EvalMode::Iterated => {
            let history = bundle.score_history();
            predict_var(&bundle.var, &history, horizon)?
        }
        EvalMode::OneStepAhead => {
            let train_scores = bundle.score_history();
            let test_scores = bundle.project_scores(test)?;
            let q = train_scores.ncols();
            let mut out = DMatrix::zeros(horizon, q);
            let mut history = train_scores.clone();
            for step in 0..horizon {
                let one = predict_var(&bundle.var, &history, 1)?;
                out.row_mut(step).copy_from(&one.row(0));
                // The observed test row enters the history for the next step.
                let rows = history.nrows();
                history = history.insert_row(rows, 0.0);
                history.row_mut(rows).copy_from(&test_scores.row(step));
            }
            out
        }
    };
    let predicted = bundle.curves_on_grid(&predicted_scores, grid)?;
    let labels = bundle.process_labels();
    let mut actual = Vec::with_capacity(test.len());
    let mut imse_records = Vec::new();
    if test.len() != predicted.len() {
        return Err(ForecastError::Misaligned(format!(
            "{} test processes but {} fitted",
            test.len(),
            predicted.len()
        )));
    }
    for (h, sample) in test.iter().enumerate() {
        let values = sample.evaluate_on_grid(grid)?;
        for step in 0..horizon {
            let score = imse(
                grid,
                predicted[h].row(step).transpose().as_slice(),
                values.row(step).transpose().as_slice(),
            )?;
            imse_records.push(ImseRecord {
                cycle: sample.cycle_indices[step],
                process: labels[h].clone(),
                imse: score,
            });
        }
        actual.push(values);
    }
    Ok(ForecastResult {
        mode,
        grid: grid.to_vec(),
        labels,
        cycle_indices: test[0].cycle_indices.clone(),
        predicted,
        actual,
        imse: imse_records,
    })
}

/// IMSE of the training-mean predictor on the same test curves, the baseline
/// any dynamic forecast has to beat.
pub fn mean_baseline_imse(
    bundle: &ForecastBundle,
    test: &[FunctionalSample],
    grid: &[f64],
) -> Result<Vec<ImseRecord>, ForecastError> {
    check_alignment(test)?;
    let means = bundle.mean_curves(grid)?;
    let labels = bundle.process_labels();
    let mut records = Vec::new();
    for (h, sample) in test.iter().enumerate() {
        let values = sample.evaluate_on_grid(grid)?;
        for step in 0..sample.len() {
            let score = imse(
                grid,
                means[h].as_slice(),
                values.row(step).transpose().as_slice(),
            )?;
            records.push(ImseRecord {
                cycle: sample.cycle_indices[step],
                process: labels[h].clone(),
                imse: score,
            });
        }
    }
    Ok(records)
}

/// The estimated lag-k operator kernel φ̂_k(t, s) = F(t) Ω_k F(s)ᵀ, an H×H
/// matrix for each argument pair.
pub fn evaluate_operator_kernel(
    bundle: &ForecastBundle,
    k: usize,
    t: f64,
    s: f64,
) -> Result<DMatrix<f64>, ForecastError> {
    if k == 0 || k > bundle.var.order {
        return Err(ForecastError::LagOutOfRange {
            k,
            p: bundle.var.order,
        });
    }
    let f_t = bundle.eigenfunction_matrix(t)?;
    let f_s = bundle.eigenfunction_matrix(s)?;
    Ok(&f_t * &bundle.var.coefficients[k - 1] * f_s.transpose())
}

/// Pointwise forecast variance band F(t) Σ̂ F(t)ᵀ from the innovation
/// covariance of the fitted VAR.
pub fn prediction_variance(bundle: &ForecastBundle, t: f64) -> Result<DMatrix<f64>, ForecastError> {
    let f_t = bundle.eigenfunction_matrix(t)?;
    Ok(&f_t * &bundle.var.residual_covariance * f_t.transpose())
}
