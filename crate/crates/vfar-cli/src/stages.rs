//! Stage implementations shared by the individual subcommands and the
//! end-to-end `pipeline` driver. Every stage reads and writes plain files so
//! runs are inspectable and reproducible.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use vfar::basis::{smooth_curves, BasisSpec, FunctionalSample};
use vfar::causality::{causality_matrix, partial_refinement, CausalityReport, LagSelector};
use vfar::diagnostics::{whiteness_report, WhitenessReport};
use vfar::forecast::{
    evaluate_forecast, fit_pipeline, forecast_curves, split_train_test, uniform_grid, Approach,
    ForecastBundle, ForecastResult,
};
use vfar::fpca::{fpca_multivariate, fpca_univariate, PcaModel};
use vfar::ingest::{parse_cycles, register_cycles, write_cycles_csv, RegisteredCurve};
use vfar::screen::{flagged_cycles, functional_bagplot_flags, OutlierReport};
use vfar::synth::{generate, SynthConfig};
use vfar::var::{residuals, ScoreSeries};

use crate::config::PipelineConfig;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create_file(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

// ---------------------------------------------------------------- ingest --

pub fn run_ingest(input: &Path, out: &Path, config: &PipelineConfig) -> Result<String> {
    let file = fs::File::open(input)
        .with_context(|| format!("opening {}", input.display()))?;
    let cycles = parse_cycles(std::io::BufReader::new(file))?;
    let registered = register_cycles(&cycles, config.jump_fraction)?;
    write_json(out, &registered)?;
    let mut per_process: std::collections::BTreeMap<String, usize> = Default::default();
    for curve in &registered {
        *per_process.entry(curve.process.to_string()).or_default() += 1;
    }
    let breakdown: Vec<String> = per_process
        .iter()
        .map(|(label, count)| format!("{label}: {count}"))
        .collect();
    Ok(format!(
        "ingest: {} raw cycles -> {} registered curves ({}) -> {}",
        cycles.len(),
        registered.len(),
        breakdown.join(", "),
        out.display()
    ))
}

// ---------------------------------------------------------------- smooth --

/// Groups registered curves by process in order of first appearance.
pub fn group_by_process(curves: &[RegisteredCurve]) -> Vec<(String, Vec<RegisteredCurve>)> {
    let mut groups: Vec<(String, Vec<RegisteredCurve>)> = Vec::new();
    for curve in curves {
        let label = curve.process.to_string();
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, list)) => list.push(curve.clone()),
            None => groups.push((label, vec![curve.clone()])),
        }
    }
    groups
}

pub fn smooth_registered(
    curves: &[RegisteredCurve],
    config: &PipelineConfig,
) -> Result<Vec<FunctionalSample>> {
    let basis = BasisSpec::cubic(config.basis_dimension)?;
    group_by_process(curves)
        .iter()
        .map(|(label, list)| smooth_curves(list, &basis, label).map_err(Into::into))
        .collect()
}

pub fn sample_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!("sample_{label}.json"))
}

pub fn run_smooth(registered: &Path, out_dir: &Path, config: &PipelineConfig) -> Result<String> {
    let curves: Vec<RegisteredCurve> = read_json(registered)?;
    let samples = smooth_registered(&curves, config)?;
    let mut names = Vec::new();
    for sample in &samples {
        write_json(&sample_path(out_dir, &sample.label), sample)?;
        names.push(format!("{} ({} curves)", sample.label, sample.len()));
    }
    Ok(format!(
        "smooth: basis dimension {} -> {} in {}",
        config.basis_dimension,
        names.join(", "),
        out_dir.display()
    ))
}

// ---------------------------------------------------------------- screen --

#[derive(Serialize, Deserialize)]
pub struct ScreenOutput {
    pub reports: Vec<(String, OutlierReport)>,
    pub flagged_cycles: Vec<u64>,
}

pub fn screen_samples(
    samples: &[FunctionalSample],
    config: &PipelineConfig,
) -> Result<(ScreenOutput, Vec<FunctionalSample>)> {
    let mut reports = Vec::new();
    for sample in samples {
        let report = functional_bagplot_flags(sample, config.fence_factor)?;
        reports.push((sample.label.clone(), report));
    }
    let pairs: Vec<(&FunctionalSample, &OutlierReport)> = samples
        .iter()
        .zip(reports.iter().map(|(_, r)| r))
        .collect();
    let flagged = flagged_cycles(&pairs);
    let screened = samples
        .iter()
        .map(|s| s.filter_cycles(|c| !flagged.contains(&c)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        ScreenOutput {
            reports,
            flagged_cycles: flagged,
        },
        screened,
    ))
}

pub fn run_screen(samples: &[PathBuf], out_dir: &Path, config: &PipelineConfig) -> Result<String> {
    let samples: Vec<FunctionalSample> = samples
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<_>>()?;
    let (output, screened) = screen_samples(&samples, config)?;
    write_json(&out_dir.join("outliers.json"), &output)?;
    for sample in &screened {
        write_json(&out_dir.join(format!("screened_{}.json", sample.label)), sample)?;
    }
    Ok(format!(
        "screen: fence factor {} flagged {} of {} cycles -> {}",
        config.fence_factor,
        output.flagged_cycles.len(),
        samples[0].len(),
        out_dir.display()
    ))
}

// ------------------------------------------------------------------ fpca --

/// Cumulative explained-variance table over the first six components, one
/// row per fitted model, in the usual report layout.
pub fn variance_table(rows: &[(String, &PcaModel)]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let columns = rows
        .iter()
        .map(|(_, m)| m.eigenvalues.len())
        .min()
        .unwrap_or(0)
        .min(6);
    let _ = writeln!(
        out,
        "Cumulative variability (%) explained by the first {columns} principal components"
    );
    let _ = write!(out, "{:<10}", "PC");
    for j in 1..=columns {
        let _ = write!(out, "{j:>10}");
    }
    let _ = writeln!(out);
    for (label, model) in rows {
        let _ = write!(out, "{label:<10}");
        let mut cumulative = 0.0;
        for &l in model.eigenvalues.iter().take(columns) {
            cumulative += l;
            let _ = write!(out, "{:>10.4}", 100.0 * cumulative / model.total_variance);
        }
        let _ = writeln!(out);
    }
    out
}

pub fn fit_fpca_models(
    samples: &[FunctionalSample],
    include_univariate: bool,
    include_multivariate: bool,
) -> Result<Vec<(String, PcaModel)>> {
    let mut models = Vec::new();
    if include_univariate {
        for sample in samples {
            models.push((sample.label.clone(), fpca_univariate(sample)?));
        }
    }
    if include_multivariate && samples.len() > 1 {
        models.push(("mult".to_string(), fpca_multivariate(samples)?));
    }
    Ok(models)
}

pub fn run_fpca(samples: &[PathBuf], out_dir: &Path, config: &PipelineConfig) -> Result<String> {
    let samples: Vec<FunctionalSample> = samples
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<_>>()?;
    let approaches = config.approach.approaches();
    let include_univariate = approaches.contains(&Approach::Univariate);
    let include_multivariate = approaches.contains(&Approach::Multivariate);
    let models = fit_fpca_models(&samples, include_univariate, include_multivariate)?;
    let mut selected = Vec::new();
    for (label, model) in &models {
        let name = if label == "mult" {
            "pca_multivariate.json".to_string()
        } else {
            format!("pca_univariate_{label}.json")
        };
        write_json(&out_dir.join(name), model)?;
        let q = vfar::fpca::choose_q(&model.eigenvalues, config.variance_threshold)?;
        selected.push(format!("{label}: q = {q}"));
    }
    let table =
        variance_table(&models.iter().map(|(l, m)| (l.clone(), m)).collect::<Vec<_>>());
    fs::write(out_dir.join("variance_table.txt"), &table)?;
    print!("{table}");
    Ok(format!(
        "fpca: threshold {} selects {} -> {}",
        config.variance_threshold,
        selected.join(", "),
        out_dir.display()
    ))
}

// ------------------------------------------------------------------- fit --

pub fn bundle_path(dir: &Path, approach: Approach) -> PathBuf {
    dir.join(format!("bundle_{approach}.json"))
}

pub fn run_fit(samples: &[PathBuf], out_dir: &Path, config: &PipelineConfig) -> Result<String> {
    let samples: Vec<FunctionalSample> = samples
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<_>>()?;
    let (train, _) = split_train_test(&samples, config.holdout)?;
    let mut notes = Vec::new();
    for approach in config.approach.approaches() {
        let bundle = fit_pipeline(&train, approach, &config.fit_config())?;
        write_json(&bundle_path(out_dir, approach), &bundle)?;
        notes.push(format!(
            "{approach}: q = {:?}, VAR({}) on {} scores",
            bundle.q,
            bundle.var.order,
            bundle.var.labels.len()
        ));
    }
    Ok(format!(
        "fit: holdout {} -> {} -> {}",
        config.holdout,
        notes.join("; "),
        out_dir.display()
    ))
}

// ------------------------------------------------------------- causality --

pub fn bundle_score_series(bundle: &ForecastBundle) -> ScoreSeries {
    ScoreSeries::new(
        bundle.score_history(),
        bundle.var.labels.clone(),
        format!("{} bundle scores", bundle.approach),
    )
}

pub fn causality_for_bundle(
    bundle: &ForecastBundle,
    config: &PipelineConfig,
) -> Result<CausalityReport> {
    let series = bundle_score_series(bundle);
    let selector = LagSelector::AicResiduals {
        max_own: config.p_max,
        cause_lags: config.cause_lags,
    };
    Ok(causality_matrix(&series, &selector, config.alpha)?)
}

pub fn write_causality(
    out_dir: &Path,
    approach: Approach,
    pairwise: &CausalityReport,
    refined: &CausalityReport,
) -> Result<()> {
    write_json(&out_dir.join(format!("causality_{approach}.json")), pairwise)?;
    fs::write(
        out_dir.join(format!("causality_{approach}.txt")),
        pairwise.render_arrow_table(),
    )?;
    write_json(
        &out_dir.join(format!("causality_partial_{approach}.json")),
        refined,
    )?;
    fs::write(
        out_dir.join(format!("causality_partial_{approach}.txt")),
        refined.render_arrow_table(),
    )?;
    Ok(())
}

pub fn run_causality(bundle: &Path, out_dir: &Path, config: &PipelineConfig) -> Result<String> {
    let bundle: ForecastBundle = read_json(bundle)?;
    let report = causality_for_bundle(&bundle, config)?;
    let refined = partial_refinement(&bundle_score_series(&bundle), &report)?;
    write_causality(out_dir, bundle.approach, &report, &refined)?;
    print!("{}", report.render_arrow_table());
    let arrows = report.decisions.iter().filter(|&&d| d).count();
    let kept = refined.decisions.iter().filter(|&&d| d).count();
    Ok(format!(
        "causality: {arrows} significant arrows at alpha {} ({kept} after partial refinement) -> {}",
        config.alpha,
        out_dir.display()
    ))
}

// -------------------------------------------------------------- diagnose --

pub fn diagnostics_for_bundle(
    bundle: &ForecastBundle,
    config: &PipelineConfig,
) -> Result<WhitenessReport> {
    let series = bundle_score_series(bundle);
    let res = residuals(&bundle.var, &series)?;
    Ok(whiteness_report(&res, config.max_lag, bundle.var.order)?)
}

pub fn write_diagnostics_csv(path: &Path, report: &WhitenessReport) -> Result<()> {
    let mut file = create_file(path)?;
    writeln!(file, "lag,ccm_p_value,portmanteau_p_value,reference")?;
    for k in 0..report.max_lag {
        let portmanteau = match report.portmanteau_p_values[k] {
            Some(p) => p.to_string(),
            None => "NA".to_string(),
        };
        writeln!(file, "{},{},{portmanteau},0.05", k + 1, report.ccm_p_values[k])?;
    }
    Ok(())
}

pub fn run_diagnose(bundle: &Path, out: &Path, config: &PipelineConfig) -> Result<String> {
    let bundle: ForecastBundle = read_json(bundle)?;
    let report = diagnostics_for_bundle(&bundle, config)?;
    write_diagnostics_csv(out, &report)?;
    Ok(format!(
        "diagnose: VAR({}) residuals over {} lags, first-5 adequacy {} -> {}",
        report.fitted_order,
        report.max_lag,
        if report.adequate_first_5 { "ok" } else { "violated" },
        out.display()
    ))
}

// -------------------------------------------------------------- forecast --

pub fn run_forecast(
    bundle: &Path,
    horizon: usize,
    out_dir: &Path,
    config: &PipelineConfig,
) -> Result<String> {
    let bundle: ForecastBundle = read_json(bundle)?;
    let grid = uniform_grid(config.eval_grid);
    let predicted = forecast_curves(&bundle, horizon, &grid)?;
    let approach = bundle.approach;
    for (label, values) in predicted.labels.iter().zip(&predicted.values) {
        let path = out_dir.join(format!("forecast_{approach}_{label}.csv"));
        let mut file = create_file(&path)?;
        writeln!(file, "cycle,t,predicted")?;
        for step in 0..values.nrows() {
            let cycle = bundle.train_cycles.1 + 1 + step as u64;
            for (j, &t) in predicted.grid.iter().enumerate() {
                writeln!(file, "{cycle},{t},{}", values[(step, j)])?;
            }
        }
    }
    Ok(format!(
        "forecast: {horizon} steps past cycle {} -> {}",
        bundle.train_cycles.1,
        out_dir.display()
    ))
}

// -------------------------------------------------------------- evaluate --

#[derive(Serialize)]
struct EvaluationMeta<'a> {
    approach: Approach,
    mode: String,
    grid_points: usize,
    horizon: usize,
    processes: &'a [String],
}

pub fn write_evaluation(
    out_dir: &Path,
    approach: Approach,
    result: &ForecastResult,
) -> Result<()> {
    for (h, label) in result.labels.iter().enumerate() {
        let path = out_dir.join(format!("forecast_{approach}_{label}.csv"));
        let mut file = create_file(&path)?;
        writeln!(file, "cycle,t,predicted,actual")?;
        for step in 0..result.cycle_indices.len() {
            let cycle = result.cycle_indices[step];
            for (j, &t) in result.grid.iter().enumerate() {
                writeln!(
                    file,
                    "{cycle},{t},{},{}",
                    result.predicted[h][(step, j)],
                    result.actual[h][(step, j)]
                )?;
            }
        }
    }
    let imse_path = out_dir.join(format!("imse_{approach}.csv"));
    let mut file = create_file(&imse_path)?;
    writeln!(file, "cycle,process,imse")?;
    for record in &result.imse {
        writeln!(file, "{},{},{}", record.cycle, record.process, record.imse)?;
    }
    write_json(
        &out_dir.join(format!("evaluate_{approach}.json")),
        &EvaluationMeta {
            approach,
            mode: result.mode.to_string(),
            grid_points: result.grid.len(),
            horizon: result.cycle_indices.len(),
            processes: &result.labels,
        },
    )?;
    Ok(())
}

pub fn run_evaluate(bundle: &Path, samples: &[PathBuf], out_dir: &Path, config: &PipelineConfig) -> Result<String> {
    let bundle: ForecastBundle = read_json(bundle)?;
    let samples: Vec<FunctionalSample> = samples
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<_>>()?;
    let train_end = bundle.train_cycles.1;
    let test: Vec<FunctionalSample> = samples
        .iter()
        .map(|s| s.filter_cycles(|c| c > train_end))
        .collect::<Result<_, _>>()?;
    let grid = uniform_grid(config.eval_grid);
    let result = evaluate_forecast(&bundle, &test, &grid, config.eval_mode.into())?;
    write_evaluation(out_dir, bundle.approach, &result)?;
    let mut median: Vec<f64> = result.imse.iter().map(|r| r.imse).collect();
    median.sort_by(f64::total_cmp);
    Ok(format!(
        "evaluate: {} mode over {} test cycles, median IMSE {:.6} -> {}",
        result.mode,
        result.cycle_indices.len(),
        median[median.len() / 2],
        out_dir.display()
    ))
}

// ----------------------------------------------------------------- synth --

pub fn run_synth(
    out_csv: &Path,
    truth_path: &Path,
    synth_config: Option<&Path>,
    cycles: Option<usize>,
    outliers: Option<usize>,
    config: &PipelineConfig,
) -> Result<String> {
    let mut synth = match synth_config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<SynthConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => SynthConfig::bivariate_default(config.seed),
    };
    if let Some(n) = cycles {
        synth.n_cycles = n;
    }
    if let Some(k) = outliers {
        synth.outlier_count = k;
    }
    let (raw_cycles, truth) = generate(&synth)?;
    let file = create_file(out_csv)?;
    write_cycles_csv(&raw_cycles, file)?;
    write_json(truth_path, &truth)?;
    Ok(format!(
        "synth: seed {} -> {} cycles x {} processes ({} outliers) -> {}, truth -> {}",
        synth.seed,
        synth.n_cycles,
        synth.processes.len(),
        truth.outlier_cycles.len(),
        out_csv.display(),
        truth_path.display()
    ))
}

// -------------------------------------------------------------- pipeline --

pub fn run_pipeline(input: &Path, out_dir: &Path, config: &PipelineConfig) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    fs::create_dir_all(out_dir)?;

    let registered_path = out_dir.join("registered.json");
    lines.push(run_ingest(input, &registered_path, config)?);

    let curves: Vec<RegisteredCurve> = read_json(&registered_path)?;
    let samples = smooth_registered(&curves, config)?;
    for sample in &samples {
        write_json(&sample_path(out_dir, &sample.label), sample)?;
    }
    lines.push(format!(
        "smooth: basis dimension {} over {} processes",
        config.basis_dimension,
        samples.len()
    ));

    let (screen_output, screened) = screen_samples(&samples, config)?;
    write_json(&out_dir.join("outliers.json"), &screen_output)?;
    for sample in &screened {
        write_json(&out_dir.join(format!("screened_{}.json", sample.label)), sample)?;
    }
    lines.push(format!(
        "screen: flagged {} of {} cycles",
        screen_output.flagged_cycles.len(),
        samples[0].len()
    ));

    let models = fit_fpca_models(&screened, true, screened.len() > 1)?;
    for (label, model) in &models {
        let name = if label == "mult" {
            "pca_multivariate.json".to_string()
        } else {
            format!("pca_univariate_{label}.json")
        };
        write_json(&out_dir.join(name), model)?;
    }
    let table =
        variance_table(&models.iter().map(|(l, m)| (l.clone(), m)).collect::<Vec<_>>());
    fs::write(out_dir.join("variance_table.txt"), &table)?;
    lines.push("fpca: variance table written".to_string());

    let (train, test) = split_train_test(&screened, config.holdout)?;
    let grid = uniform_grid(config.eval_grid);
    for approach in config.approach.approaches() {
        let bundle = fit_pipeline(&train, approach, &config.fit_config())?;
        write_json(&bundle_path(out_dir, approach), &bundle)?;
        lines.push(format!(
            "fit [{approach}]: q = {:?}, VAR({})",
            bundle.q, bundle.var.order
        ));

        let causality = causality_for_bundle(&bundle, config)?;
        let refined = partial_refinement(&bundle_score_series(&bundle), &causality)?;
        write_causality(out_dir, approach, &causality, &refined)?;
        let arrows = causality.decisions.iter().filter(|&&d| d).count();
        let kept = refined.decisions.iter().filter(|&&d| d).count();
        lines.push(format!(
            "causality [{approach}]: {arrows} arrows, {kept} after partial refinement"
        ));

        let report = diagnostics_for_bundle(&bundle, config)?;
        write_diagnostics_csv(&out_dir.join(format!("diagnostics_{approach}.csv")), &report)?;
        lines.push(format!(
            "diagnose [{approach}]: first-5 adequacy {}",
            if report.adequate_first_5 { "ok" } else { "violated" }
        ));

        if !test.is_empty() {
            let result = evaluate_forecast(&bundle, &test, &grid, config.eval_mode.into())?;
            write_evaluation(out_dir, approach, &result)?;
            let mut values: Vec<f64> = result.imse.iter().map(|r| r.imse).collect();
            values.sort_by(f64::total_cmp);
            lines.push(format!(
                "evaluate [{approach}]: median IMSE {:.6} over {} test cycles",
                values[values.len() / 2],
                result.cycle_indices.len()
            ));
        }
    }
    Ok(lines)
}
