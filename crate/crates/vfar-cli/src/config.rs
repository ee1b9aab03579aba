//! Pipeline configuration: defaults, TOML config file, and flag overrides.

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use std::path::Path;

use vfar::forecast::{Approach, EvalMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproachChoice {
    Univariate,
    Multivariate,
    Both,
}

impl ApproachChoice {
    pub fn approaches(self) -> Vec<Approach> {
        match self {
            ApproachChoice::Univariate => vec![Approach::Univariate],
            ApproachChoice::Multivariate => vec![Approach::Multivariate],
            ApproachChoice::Both => vec![Approach::Univariate, Approach::Multivariate],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalModeChoice {
    OneStepAhead,
    Iterated,
}

impl From<EvalModeChoice> for EvalMode {
    fn from(c: EvalModeChoice) -> Self {
        match c {
            EvalModeChoice::OneStepAhead => EvalMode::OneStepAhead,
            EvalModeChoice::Iterated => EvalMode::Iterated,
        }
    }
}

/// All pipeline knobs with their defaults. A flat TOML document with the
/// same keys overrides the defaults, and command-line flags override both.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub jump_fraction: f64,
    pub basis_dimension: usize,
    pub fence_factor: f64,
    pub variance_threshold: f64,
    pub holdout: usize,
    pub p_max: usize,
    pub prune_threshold: f64,
    pub alpha: f64,
    pub approach: ApproachChoice,
    pub eval_grid: usize,
    pub eval_mode: EvalModeChoice,
    pub max_lag: usize,
    pub cause_lags: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            jump_fraction: 0.20,
            basis_dimension: 20,
            fence_factor: 2.58,
            variance_threshold: 0.95,
            holdout: 10,
            p_max: 10,
            prune_threshold: 1.96,
            alpha: 0.05,
            approach: ApproachChoice::Both,
            eval_grid: 201,
            eval_mode: EvalModeChoice::OneStepAhead,
            max_lag: 15,
            cause_lags: 2,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                anyhow::bail!("invalid configuration: {what}")
            }
        };
        check(
            self.jump_fraction > 0.0 && self.jump_fraction < 1.0,
            "jump_fraction must lie in (0, 1)",
        )?;
        check(self.basis_dimension >= 4, "basis_dimension must be at least 4")?;
        check(self.fence_factor > 1.0, "fence_factor must exceed 1")?;
        check(
            self.variance_threshold > 0.0 && self.variance_threshold < 1.0,
            "variance_threshold must lie in (0, 1)",
        )?;
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha must lie in (0, 1)")?;
        check(self.eval_grid >= 2, "eval_grid needs at least 2 points")?;
        check(self.cause_lags >= 1, "cause_lags must be at least 1")?;
        Ok(())
    }

    pub fn fit_config(&self) -> vfar::forecast::FitConfig {
        vfar::forecast::FitConfig {
            variance_threshold: self.variance_threshold,
            p_max: self.p_max,
            prune_threshold: self.prune_threshold,
        }
    }
}

/// Flag-level overrides shared by most subcommands; `None` keeps the value
/// from the config file or the default.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigOverrides {
    /// Flat TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Relative current change that marks the switch point.
    #[arg(long, global = true)]
    pub jump_fraction: Option<f64>,
    /// Cubic B-spline basis dimension.
    #[arg(long, global = true)]
    pub basis_dimension: Option<usize>,
    /// Bagplot fence inflation factor.
    #[arg(long, global = true)]
    pub fence_factor: Option<f64>,
    /// Cumulative explained-variance threshold for component selection.
    #[arg(long, global = true)]
    pub variance_threshold: Option<f64>,
    /// Number of final cycles reserved as the test sample.
    #[arg(long, global = true)]
    pub holdout: Option<usize>,
    /// Largest VAR order considered by AIC selection.
    #[arg(long, global = true)]
    pub p_max: Option<usize>,
    /// |t| threshold below which VAR coefficients are pruned.
    #[arg(long, global = true)]
    pub prune_threshold: Option<f64>,
    /// Significance level for causality decisions.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Score layout: univariate, multivariate, or both.
    #[arg(long, global = true, value_enum)]
    pub approach: Option<ApproachChoice>,
    /// Number of evaluation grid points on [0, 1].
    #[arg(long, global = true)]
    pub eval_grid: Option<usize>,
    /// Test-sample forecasting mode.
    #[arg(long, global = true, value_enum)]
    pub eval_mode: Option<EvalModeChoice>,
    /// Largest residual lag in the whiteness diagnostics.
    #[arg(long, global = true)]
    pub max_lag: Option<usize>,
    /// Cause-lag count in pairwise causality tests.
    #[arg(long, global = true)]
    pub cause_lags: Option<usize>,
    /// Seed for synthetic data generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl ConfigOverrides {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(value) = self.$field { config.$field = value; })*
            };
        }
        apply!(
            jump_fraction,
            basis_dimension,
            fence_factor,
            variance_threshold,
            holdout,
            p_max,
            prune_threshold,
            alpha,
            approach,
            eval_grid,
            eval_mode,
            max_lag,
            cause_lags,
            seed
        );
        config.validate()?;
        Ok(config)
    }
}
