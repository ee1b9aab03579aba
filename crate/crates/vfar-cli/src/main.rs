//! Command-line driver for the functional time series forecasting pipeline:
//! cycle ingestion, smoothing, outlier screening, FPCA, VAR fitting,
//! causality analysis, residual diagnostics, forecasting, and synthetic data
//! generation, each as a standalone stage or chained by `pipeline`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod config;
mod stages;

use config::ConfigOverrides;

#[derive(Parser)]
#[command(name = "vfar", version, about = "Vector functional time series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a cycle CSV, detect switch points, and register curves on [0, 1].
    Ingest {
        /// Cycle CSV with header cycle,process,voltage,current.
        #[arg(long)]
        input: PathBuf,
        /// Output JSON of registered curves.
        #[arg(long, default_value = "registered.json")]
        out: PathBuf,
    },
    /// Smooth registered curves into per-process basis coefficients.
    Smooth {
        /// Registered-curve JSON from `ingest`.
        #[arg(long)]
        registered: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Flag outlying cycles with the functional bagplot and write screened samples.
    Screen {
        /// Per-process sample JSON files from `smooth`.
        #[arg(long, num_args = 1.., required = true)]
        samples: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Fit FPCA models and print the cumulative explained-variance table.
    Fpca {
        #[arg(long, num_args = 1.., required = true)]
        samples: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Fit the full FPCA + VAR bundle(s) on the training span.
    Fit {
        #[arg(long, num_args = 1.., required = true)]
        samples: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Pairwise Granger causality over the bundle's score series.
    Causality {
        /// Fitted bundle JSON from `fit`.
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Residual whiteness diagnostics (CCM and portmanteau p-values).
    Diagnose {
        #[arg(long)]
        bundle: PathBuf,
        /// Output CSV of lag, p-values, and the 0.05 reference line.
        #[arg(long, default_value = "diagnostics.csv")]
        out: PathBuf,
    },
    /// Iterated curve forecasts past the end of the training sample.
    Forecast {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Forecast the held-out cycles and score them by IMSE.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        /// The full (screened) per-process samples; test cycles are the ones
        /// after the bundle's training span.
        #[arg(long, num_args = 1.., required = true)]
        samples: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Generate synthetic cycles with known ground truth.
    Synth {
        /// Output cycle CSV.
        #[arg(long, default_value = "cycles.csv")]
        out: PathBuf,
        /// Ground-truth JSON (true scores, dynamics, outliers).
        #[arg(long, default_value = "truth.json")]
        truth: PathBuf,
        /// Full generator configuration in TOML; omitted fields use the
        /// bivariate default.
        #[arg(long)]
        synth_config: Option<PathBuf>,
        /// Number of cycles to generate.
        #[arg(long)]
        cycles: Option<usize>,
        /// Number of outlier cycles to inject.
        #[arg(long)]
        outliers: Option<usize>,
    },
    /// Run every stage end to end and write all artifacts.
    Pipeline {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
    },
}

impl Command {
    fn stage_name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Smooth { .. } => "smooth",
            Command::Screen { .. } => "screen",
            Command::Fpca { .. } => "fpca",
            Command::Fit { .. } => "fit",
            Command::Causality { .. } => "causality",
            Command::Diagnose { .. } => "diagnose",
            Command::Forecast { .. } => "forecast",
            Command::Evaluate { .. } => "evaluate",
            Command::Synth { .. } => "synth",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}

fn run(cli: &Cli) -> Result<Vec<String>> {
    let config = cli.overrides.resolve()?;
    let lines = match &cli.command {
        Command::Ingest { input, out } => vec![stages::run_ingest(input, out, &config)?],
        Command::Smooth { registered, out_dir } => {
            vec![stages::run_smooth(registered, out_dir, &config)?]
        }
        Command::Screen { samples, out_dir } => {
            vec![stages::run_screen(samples, out_dir, &config)?]
        }
        Command::Fpca { samples, out_dir } => vec![stages::run_fpca(samples, out_dir, &config)?],
        Command::Fit { samples, out_dir } => vec![stages::run_fit(samples, out_dir, &config)?],
        Command::Causality { bundle, out_dir } => {
            vec![stages::run_causality(bundle, out_dir, &config)?]
        }
        Command::Diagnose { bundle, out } => vec![stages::run_diagnose(bundle, out, &config)?],
        Command::Forecast {
            bundle,
            horizon,
            out_dir,
        } => vec![stages::run_forecast(bundle, *horizon, out_dir, &config)?],
        Command::Evaluate {
            bundle,
            samples,
            out_dir,
        } => vec![stages::run_evaluate(bundle, samples, out_dir, &config)?],
        Command::Synth {
            out,
            truth,
            synth_config,
            cycles,
            outliers,
        } => vec![stages::run_synth(
            out,
            truth,
            synth_config.as_deref(),
            *cycles,
            *outliers,
            &config,
        )?],
        Command::Pipeline { input, out_dir } => stages::run_pipeline(input, out_dir, &config)?,
    };
    Ok(lines)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage_name();
    match run(&cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            let payload = serde_json::json!({
                "stage": stage,
                "error": format!("{err:#}"),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
