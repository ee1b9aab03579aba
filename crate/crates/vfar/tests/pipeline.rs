//! Closed-loop integration tests: raw cycle CSV through registration,
//! smoothing, screening, fitting, and forecasting; plus an exactness oracle
//! on noiseless autoregressive curve data.

use nalgebra::{DMatrix, DVector};

use vfar::basis::{smooth_curves, BasisSpec, FunctionalSample};
use vfar::forecast::{
    evaluate_forecast, fit_pipeline, forecast_curves, imse, mean_baseline_imse, split_train_test,
    uniform_grid, Approach, EvalMode, FitConfig, ForecastBundle,
};
use vfar::fpca::fpca_univariate;
use vfar::ingest::{parse_cycles, register_cycles, write_cycles_csv};
use vfar::screen::{flagged_cycles, functional_bagplot_flags};
use vfar::synth::{generate, SynthConfig};
use vfar::var::{fit_var_with_options, ScoreSeries};

#[test]
fn raw_csv_round_trip_through_the_full_pipeline() {
    let mut config = SynthConfig::bivariate_default(31);
    config.n_cycles = 140;
    config.outlier_count = 2;
    let (cycles, truth) = generate(&config).unwrap();

    // Through the wire format.
    let mut buffer = Vec::new();
    write_cycles_csv(&cycles, &mut buffer).unwrap();
    let parsed = parse_cycles(buffer.as_slice()).unwrap();
    assert_eq!(parsed.len(), 280);

    let registered = register_cycles(&parsed, 0.20).unwrap();
    let basis = BasisSpec::cubic(20).unwrap();
    let set_curves: Vec<_> = registered
        .iter()
        .filter(|c| c.process == vfar::Process::Set)
        .cloned()
        .collect();
    let reset_curves: Vec<_> = registered
        .iter()
        .filter(|c| c.process == vfar::Process::Reset)
        .cloned()
        .collect();
    let samples = [smooth_curves(&set_curves, &basis, "set").unwrap(),
        smooth_curves(&reset_curves, &basis, "reset").unwrap()];

    // Screening drops the injected outliers (and possibly a few fence
    // stragglers), identically across processes.
    let reports: Vec<_> = samples
        .iter()
        .map(|s| functional_bagplot_flags(s, 2.58).unwrap())
        .collect();
    let pairs: Vec<_> = samples.iter().zip(reports.iter()).collect();
    let flagged = flagged_cycles(&pairs);
    for outlier in &truth.outlier_cycles {
        assert!(flagged.contains(outlier), "outlier cycle {outlier} not flagged");
    }
    let screened: Vec<FunctionalSample> = samples
        .iter()
        .map(|s| s.filter_cycles(|c| !flagged.contains(&c)).unwrap())
        .collect();
    assert_eq!(screened[0].cycle_indices, screened[1].cycle_indices);

    // Fit and forecast under both score layouts.
    let (train, test) = split_train_test(&screened, 10).unwrap();
    let grid = uniform_grid(201);
    for approach in [Approach::Univariate, Approach::Multivariate] {
        let bundle = fit_pipeline(&train, approach, &FitConfig::default()).unwrap();
        let result = evaluate_forecast(&bundle, &test, &grid, EvalMode::OneStepAhead).unwrap();
        assert_eq!(result.imse.len(), 20);
        assert!(result.imse.iter().all(|r| r.imse.is_finite() && r.imse >= 0.0));
        let baseline = mean_baseline_imse(&bundle, &test, &grid).unwrap();
        let model: f64 = result.imse.iter().map(|r| r.imse).sum();
        let reference: f64 = baseline.iter().map(|r| r.imse).sum();
        assert!(
            model < reference,
            "{approach}: total IMSE {model} not below baseline {reference}"
        );

        // Bundles survive the wire format with identical forecasts.
        let json = serde_json::to_string(&bundle).unwrap();
        let back: ForecastBundle = serde_json::from_str(&json).unwrap();
        let again = evaluate_forecast(&back, &test, &grid, EvalMode::OneStepAhead).unwrap();
        for (a, b) in result.predicted.iter().zip(&again.predicted) {
            assert_eq!(a, b);
        }
    }
}

/// With curves generated exactly as a VAR(1) on two basis-space directions
/// and innovations zeroed, the estimated one-step forecast reproduces the
/// true next curve to numerical precision.
#[test]
fn noiseless_var_forecast_is_exact() {
    let k = 8;
    let basis = BasisSpec::cubic(k).unwrap();
    let w = basis.gram_matrix();

    // Two W-orthonormal directions.
    let mut d1 = DVector::from_fn(k, |i, _| 1.0 + (i as f64 * 0.9).sin());
    let norm1 = (d1.transpose() * &w * &d1)[(0, 0)].sqrt();
    d1 /= norm1;
    let mut d2 = DVector::from_fn(k, |i, _| (i as f64 * 1.3).cos());
    let proj = (d1.transpose() * &w * &d2)[(0, 0)];
    d2 -= proj * &d1;
    let norm2 = (d2.transpose() * &w * &d2)[(0, 0)].sqrt();
    d2 /= norm2;

    // Deterministic score recursion with a stable, rotating coefficient.
    let omega = DMatrix::from_row_slice(2, 2, &[0.90, 0.30, -0.20, 0.80]);
    let n = 30;
    let mut scores = DMatrix::zeros(n + 1, 2);
    scores[(0, 0)] = 3.0;
    scores[(0, 1)] = -2.0;
    for i in 1..=n {
        let next = &omega * scores.row(i - 1).transpose();
        scores.row_mut(i).copy_from(&next.transpose());
    }
    let mean = DVector::from_fn(k, |i, _| 0.2 * i as f64);
    let curve_coefficients = |row: usize| -> DVector<f64> {
        &mean + scores[(row, 0)] * &d1 + scores[(row, 1)] * &d2
    };
    let mut coefficients = DMatrix::zeros(n, k);
    for i in 0..n {
        coefficients.row_mut(i).copy_from(&curve_coefficients(i).transpose());
    }
    let sample = FunctionalSample::new(
        basis.clone(),
        coefficients,
        (0..n as u64).collect(),
        "exact".into(),
    )
    .unwrap();

    // Hand-assembled bundle: FPCA plus a VAR(1) fitted on the exact
    // recursion. FPCA centers by the sample mean, which is nonzero on a
    // decaying deterministic path, so the centered scores follow an affine
    // recursion; the intercept option makes the fit exact.
    let model = fpca_univariate(&sample).unwrap();
    let series = ScoreSeries::new(
        model.scores.columns(0, 2).into_owned(),
        vec!["EPC1".into(), "EPC2".into()],
        "exact scores",
    );
    let var = fit_var_with_options(&series, 1, None, true).unwrap();
    assert!(var.residual_covariance.abs().max() < 1e-18);
    let bundle = ForecastBundle {
        approach: Approach::Univariate,
        pca: vec![model],
        q: vec![2],
        var,
        train_cycles: (0, n as u64 - 1),
    };

    let grid = uniform_grid(201);
    let predicted = forecast_curves(&bundle, 1, &grid).unwrap();
    let truth_coeffs = curve_coefficients(n);
    let design = basis.design_matrix(&grid).unwrap();
    let truth_values: Vec<f64> = (design * truth_coeffs).iter().cloned().collect();
    let predicted_values: Vec<f64> = predicted.values[0].row(0).iter().cloned().collect();
    let error = imse(&grid, &predicted_values, &truth_values).unwrap();
    assert!(error < 1e-6, "one-step IMSE {error} on noiseless data");
}
