//! Modeling and forecasting of vector functional time series.
//!
//! Curves measured cycle by cycle (for example the current-voltage sweeps of a
//! resistive switching device) are reduced to functional principal component
//! scores, and the score vector series is modeled with a vector autoregression.
//! The crate covers the full workflow: raw cycle ingestion and registration
//! ([`ingest`]), B-spline smoothing ([`basis`]), bagplot outlier screening
//! ([`screen`]), univariate and multivariate FPCA ([`fpca`]), VAR estimation
//! with order selection and pruning ([`var`]), Granger causality analysis
//! ([`causality`]), residual whiteness diagnostics ([`diagnostics`]),
//! curve-level forecasting and scoring ([`forecast`]), and a synthetic data
//! generator with known ground truth ([`synth`]).
//!
//! ```
//! use vfar::forecast::{fit_pipeline, forecast_curves, split_train_test,
//!                      uniform_grid, Approach, FitConfig};
//! use vfar::synth::SynthConfig;
//!
//! let mut config = SynthConfig::bivariate_default(7);
//! config.n_cycles = 60;
//! let (samples, _truth) = vfar::synth::generate_samples(&config, 12)?;
//! let (train, _test) = split_train_test(&samples, 5)?;
//! let fit = FitConfig { p_max: 3, ..FitConfig::default() };
//! let bundle = fit_pipeline(&train, Approach::Multivariate, &fit)?;
//! let forecast = forecast_curves(&bundle, 5, &uniform_grid(101))?;
//! assert_eq!(forecast.values.len(), 2);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod basis;
pub mod causality;
pub mod diagnostics;
pub mod forecast;
pub mod fpca;
pub mod ingest;
pub mod screen;
mod stats;
pub mod synth;
pub mod var;

pub use basis::{BasisSpec, FunctionalSample};
pub use forecast::{Approach, EvalMode, FitConfig, ForecastBundle};
pub use fpca::PcaModel;
pub use ingest::{Process, RawCycle, RegisteredCurve};
pub use var::{ScoreSeries, VarModel};
