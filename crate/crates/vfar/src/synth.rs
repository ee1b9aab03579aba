//! Synthetic cycle data with fully known ground truth: orthonormal Fourier
//! eigenfunctions, a configured score VAR, observation noise, injectable
//! outliers, and raw-cycle emission compatible with the ingest format. The
//! dense-grid FPCA oracle used to cross-check the basis-space implementation
//! also lives here.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{smooth_curves, BasisSpec, FunctionalSample};
use crate::ingest::{IvSample, Process, RawCycle, RegisteredCurve};
use crate::stats::companion_spectral_radius;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("score dynamics are unstable: companion spectral radius {0:.4} >= 1")]
    UnstableDynamics(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Basis(#[from] crate::basis::BasisError),
}

/// Mean function of one process.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MeanSpec {
    /// a + (b - a) / (1 + exp(-steepness (t - center))), the smooth ramp
    /// shape of a log-current trace.
    LogisticRamp {
        lower: f64,
        upper: f64,
        center: f64,
        steepness: f64,
    },
    Zero,
}

impl MeanSpec {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            MeanSpec::LogisticRamp {
                lower,
                upper,
                center,
                steepness,
            } => lower + (upper - lower) / (1.0 + (-steepness * (t - center)).exp()),
            MeanSpec::Zero => 0.0,
        }
    }
}

/// Orthonormal shifted-Fourier family on [0, 1]: 1, √2·cos(2πt), √2·sin(2πt),
/// √2·cos(4πt), √2·sin(4πt), ...
pub fn fourier_eigenfunction(j: usize, t: f64) -> f64 {
    if j == 0 {
        return 1.0;
    }
    let frequency = j.div_ceil(2) as f64;
    let angle = 2.0 * std::f64::consts::PI * frequency * t;
    if j % 2 == 1 {
        std::f64::consts::SQRT_2 * angle.cos()
    } else {
        std::f64::consts::SQRT_2 * angle.sin()
    }
}

/// One functional variable of the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub label: String,
    pub process: Process,
    pub mean: MeanSpec,
    /// Target variances of the Fourier-mode scores, in family order.
    pub eigenvalues: Vec<f64>,
    pub grid_points: usize,
    pub noise_sd: f64,
    /// Grid jitter as a fraction of the spacing; must stay below 0.5 so the
    /// observation grid remains strictly increasing.
    pub grid_jitter: f64,
    pub switch_voltage: f64,
    /// Relative jitter of the per-cycle switch voltage.
    pub switch_jitter: f64,
}

/// Full generator configuration. The score VAR acts on the joint vector of
/// all per-process scores, so cross-process dependence comes from `omega`
/// and `innovation_covariance`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SynthConfigDto", into = "SynthConfigDto")]
pub struct SynthConfig {
    pub n_cycles: usize,
    pub processes: Vec<ProcessSpec>,
    pub omega: Vec<DMatrix<f64>>,
    pub innovation_covariance: DMatrix<f64>,
    pub outlier_count: usize,
    pub outlier_scale: f64,
    pub seed: u64,
    pub burn_in: usize,
}

#[derive(Serialize, Deserialize)]
struct SynthConfigDto {
    n_cycles: usize,
    processes: Vec<ProcessSpec>,
    /// One row-major q×q matrix per lag, q = total score count.
    omega: Vec<Vec<f64>>,
    innovation_covariance: Vec<f64>,
    #[serde(default)]
    outlier_count: usize,
    #[serde(default = "default_outlier_scale")]
    outlier_scale: f64,
    seed: u64,
    #[serde(default = "default_burn_in")]
    burn_in: usize,
}

fn default_outlier_scale() -> f64 {
    10.0
}

fn default_burn_in() -> usize {
    200
}

impl From<SynthConfig> for SynthConfigDto {
    fn from(c: SynthConfig) -> Self {
        let row_major = |m: &DMatrix<f64>| -> Vec<f64> {
            m.row_iter()
                .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
                .collect()
        };
        SynthConfigDto {
            n_cycles: c.n_cycles,
            processes: c.processes,
            omega: c.omega.iter().map(row_major).collect(),
            innovation_covariance: row_major(&c.innovation_covariance),
            outlier_count: c.outlier_count,
            outlier_scale: c.outlier_scale,
            seed: c.seed,
            burn_in: c.burn_in,
        }
    }
}

impl TryFrom<SynthConfigDto> for SynthConfig {
    type Error = String;

    fn try_from(dto: SynthConfigDto) -> Result<Self, String> {
        let q: usize = dto.processes.iter().map(|p| p.eigenvalues.len()).sum();
        let omega = dto
            .omega
            .iter()
            .map(|m| {
                if m.len() != q * q {
                    Err(format!("each omega must be {q}x{q} row-major"))
                } else {
                    Ok(DMatrix::from_row_slice(q, q, m))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if dto.innovation_covariance.len() != q * q {
            return Err(format!("innovation covariance must be {q}x{q} row-major"));
        }
        Ok(SynthConfig {
            n_cycles: dto.n_cycles,
            processes: dto.processes,
            omega,
            innovation_covariance: DMatrix::from_row_slice(q, q, &dto.innovation_covariance),
            outlier_count: dto.outlier_count,
            outlier_scale: dto.outlier_scale,
            seed: dto.seed,
            burn_in: dto.burn_in,
        })
    }
}

/// Everything the generator knows that a pipeline under test must recover.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GroundTruthDto", into = "GroundTruthDto")]
pub struct GroundTruth {
    /// Joint score rows, one per emitted cycle (after outlier injection).
    pub scores: DMatrix<f64>,
    /// Score dynamics on the emitted scale.
    pub omega: Vec<DMatrix<f64>>,
    pub innovation_covariance: DMatrix<f64>,
    pub process_labels: Vec<String>,
    /// Configured per-process score variances.
    pub eigenvalues: Vec<Vec<f64>>,
    pub outlier_cycles: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthDto {
    n: usize,
    q: usize,
    scores: Vec<f64>,
    omega: Vec<Vec<f64>>,
    innovation_covariance: Vec<f64>,
    process_labels: Vec<String>,
    eigenvalues: Vec<Vec<f64>>,
    outlier_cycles: Vec<u64>,
}

impl From<GroundTruth> for GroundTruthDto {
    fn from(g: GroundTruth) -> Self {
        let row_major = |m: &DMatrix<f64>| -> Vec<f64> {
            m.row_iter()
                .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
                .collect()
        };
        GroundTruthDto {
            n: g.scores.nrows(),
            q: g.scores.ncols(),
            scores: row_major(&g.scores),
            omega: g.omega.iter().map(row_major).collect(),
            innovation_covariance: row_major(&g.innovation_covariance),
            process_labels: g.process_labels,
            eigenvalues: g.eigenvalues,
            outlier_cycles: g.outlier_cycles,
        }
    }
}

impl TryFrom<GroundTruthDto> for GroundTruth {
    type Error = String;

    fn try_from(dto: GroundTruthDto) -> Result<Self, String> {
        if dto.scores.len() != dto.n * dto.q {
            return Err("score array has wrong length".into());
        }
        Ok(GroundTruth {
            scores: DMatrix::from_row_slice(dto.n, dto.q, &dto.scores),
            omega: dto
                .omega
                .iter()
                .map(|m| DMatrix::from_row_slice(dto.q, dto.q, m))
                .collect(),
            innovation_covariance: DMatrix::from_row_slice(dto.q, dto.q, &dto.innovation_covariance),
            process_labels: dto.process_labels,
            eigenvalues: dto.eigenvalues,
            outlier_cycles: dto.outlier_cycles,
        })
    }
}

impl SynthConfig {
    /// A stable bivariate set/reset configuration. The score dynamics are
    /// 0.7 times an orthogonal rotation, so every score mode is persistent
    /// with spectral radius exactly 0.7 and the rotation couples the two
    /// processes.
    pub fn bivariate_default(seed: u64) -> Self {
        let givens = |q: usize, i: usize, j: usize, theta: f64| -> DMatrix<f64> {
            let mut g = DMatrix::identity(q, q);
            let (sin, cos) = theta.sin_cos();
            g[(i, i)] = cos;
            g[(j, j)] = cos;
            g[(i, j)] = -sin;
            g[(j, i)] = sin;
            g
        };
        let rotation = givens(4, 0, 2, 0.40)
            * givens(4, 1, 3, 0.35)
            * givens(4, 0, 1, 0.50)
            * givens(4, 2, 3, 0.30);
        let omega = vec![rotation * 0.7];
        SynthConfig {
            n_cycles: 200,
            processes: vec![
                ProcessSpec {
                    label: "set".into(),
                    process: Process::Set,
                    mean: MeanSpec::LogisticRamp {
                        lower: -8.0,
                        upper: -4.0,
                        center: 0.55,
                        steepness: 9.0,
                    },
                    eigenvalues: vec![1.0, 0.35],
                    grid_points: 80,
                    noise_sd: 0.05,
                    grid_jitter: 0.25,
                    switch_voltage: 1.1,
                    switch_jitter: 0.08,
                },
                ProcessSpec {
                    label: "reset".into(),
                    process: Process::Reset,
                    mean: MeanSpec::LogisticRamp {
                        lower: -4.5,
                        upper: -2.5,
                        center: 0.45,
                        steepness: 7.0,
                    },
                    eigenvalues: vec![0.8, 0.3],
                    grid_points: 80,
                    noise_sd: 0.05,
                    grid_jitter: 0.25,
                    switch_voltage: 0.6,
                    switch_jitter: 0.08,
                },
            ],
            omega,
            innovation_covariance: DMatrix::identity(4, 4),
            outlier_count: 0,
            outlier_scale: 10.0,
            seed,
            burn_in: 200,
        }
    }

    fn total_scores(&self) -> usize {
        self.processes.iter().map(|p| p.eigenvalues.len()).sum()
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_cycles == 0 || self.processes.is_empty() {
            return Err(SynthError::InvalidConfig(
                "need at least one cycle and one process".into(),
            ));
        }
        let q = self.total_scores();
        if self.innovation_covariance.nrows() != q || self.innovation_covariance.ncols() != q {
            return Err(SynthError::InvalidConfig(format!(
                "innovation covariance must be {q}x{q}"
            )));
        }
        for omega in &self.omega {
            if omega.nrows() != q || omega.ncols() != q {
                return Err(SynthError::InvalidConfig(format!("omega must be {q}x{q}")));
            }
        }
        for p in &self.processes {
            if p.grid_points < 2 {
                return Err(SynthError::InvalidConfig(format!(
                    "process `{}` needs at least 2 grid points",
                    p.label
                )));
            }
            if !(0.0..0.5).contains(&p.grid_jitter) {
                return Err(SynthError::InvalidConfig(format!(
                    "grid jitter of `{}` must lie in [0, 0.5)",
                    p.label
                )));
            }
            if p.switch_voltage <= 0.0 {
                return Err(SynthError::InvalidConfig(format!(
                    "switch voltage of `{}` must be positive",
                    p.label
                )));
            }
        }
        let asymmetry = (&self.innovation_covariance - self.innovation_covariance.transpose())
            .abs()
            .max();
        if asymmetry > 1e-10 || self.innovation_covariance.clone().cholesky().is_none() {
            return Err(SynthError::InvalidConfig(
                "innovation covariance must be symmetric positive definite".into(),
            ));
        }
        let radius = companion_spectral_radius(&self.omega);
        if !self.omega.is_empty() && radius >= 1.0 {
            return Err(SynthError::UnstableDynamics(radius));
        }
        Ok(())
    }
}

/// Stationary covariance of the companion VAR(1) by fixed-point iteration.
fn stationary_covariance(omega: &[DMatrix<f64>], innovation: &DMatrix<f64>) -> DMatrix<f64> {
    let q = innovation.nrows();
    let p = omega.len();
    if p == 0 {
        return innovation.clone();
    }
    let d = p * q;
    let mut companion = DMatrix::zeros(d, d);
    for (k, m) in omega.iter().enumerate() {
        companion.view_mut((0, k * q), (q, q)).copy_from(m);
    }
    for k in 1..p {
        companion
            .view_mut((k * q, (k - 1) * q), (q, q))
            .copy_from(&DMatrix::identity(q, q));
    }
    let mut forcing = DMatrix::zeros(d, d);
    forcing.view_mut((0, 0), (q, q)).copy_from(innovation);
    let mut s = forcing.clone();
    for _ in 0..10_000 {
        let next = &companion * &s * companion.transpose() + &forcing;
        let delta = (&next - &s).abs().max();
        s = next;
        if delta < 1e-13 {
            break;
        }
    }
    s.view((0, 0), (q, q)).into_owned()
}

struct ScorePlan {
    scores: DMatrix<f64>,
    omega_emitted: Vec<DMatrix<f64>>,
    innovation_emitted: DMatrix<f64>,
    outliers: Vec<u64>,
}

/// Simulates the joint score series on the configured scale: a standardized
/// VAR path is rescaled per coordinate so every score hits its configured
/// marginal variance exactly in the stationary regime.
fn simulate_scores(config: &SynthConfig, rng: &mut ChaCha8Rng) -> ScorePlan {
    let q = config.total_scores();
    let n = config.n_cycles;
    let raw = crate::var::simulate_var(
        &config.omega,
        &config.innovation_covariance,
        n,
        config.burn_in,
        rng,
    );
    let stationary = stationary_covariance(&config.omega, &config.innovation_covariance);
    let targets: Vec<f64> = config
        .processes
        .iter()
        .flat_map(|p| p.eigenvalues.iter().cloned())
        .collect();
    let scale = DVector::from_fn(q, |j, _| {
        let v = stationary[(j, j)];
        if v > 0.0 && targets[j] > 0.0 {
            (targets[j] / v).sqrt()
        } else if targets[j] == 0.0 {
            0.0
        } else {
            1.0
        }
    });
    let mut scores = raw;
    for j in 0..q {
        scores.column_mut(j).scale_mut(scale[j]);
    }
    // Outlier injection: magnified score rows at distinct random cycles.
    let mut outliers: Vec<u64> = Vec::new();
    if config.outlier_count > 0 {
        let mut available: Vec<u64> = (0..n as u64).collect();
        for _ in 0..config.outlier_count.min(n) {
            let pick = rng.random_range(0..available.len());
            outliers.push(available.swap_remove(pick));
        }
        outliers.sort_unstable();
        for &cycle in &outliers {
            let i = cycle as usize;
            for j in 0..q {
                scores[(i, j)] *= config.outlier_scale;
            }
        }
    }
    // Dynamics on the emitted scale: D Ω D⁻¹ with D = diag(scale).
    let d = DMatrix::from_diagonal(&scale);
    let d_inv = DMatrix::from_diagonal(&scale.map(|s| if s != 0.0 { 1.0 / s } else { 0.0 }));
    let omega_emitted = config.omega.iter().map(|m| &d * m * &d_inv).collect();
    let innovation_emitted = &d * &config.innovation_covariance * &d;
    ScorePlan {
        scores,
        omega_emitted,
        innovation_emitted,
        outliers,
    }
}

fn ground_truth(config: &SynthConfig, plan: ScorePlan) -> GroundTruth {
    GroundTruth {
        scores: plan.scores,
        omega: plan.omega_emitted,
        innovation_covariance: plan.innovation_emitted,
        process_labels: config.processes.iter().map(|p| p.label.clone()).collect(),
        eigenvalues: config
            .processes
            .iter()
            .map(|p| p.eigenvalues.clone())
            .collect(),
        outlier_cycles: plan.outliers,
    }
}

/// Largest organic log-current step allowed in the trigger direction: an 18%
/// relative change, safely below the 20% detection rule, so the appended
/// post-switch jump is always the first sample pair that trips the detector.
const MAX_ORGANIC_REL_STEP: f64 = 0.18;

/// One registered-scale observation: jittered grid ending exactly at 1 and
/// noisy log-current values built from mean, eigenfunctions, and scores.
/// Consecutive values are clamped so no organic pair exceeds the detection
/// threshold in the process's trigger direction.
fn observe_curve(
    spec: &ProcessSpec,
    scores: &[f64],
    cycle_index: u64,
    rng: &mut ChaCha8Rng,
) -> RegisteredCurve {
    let g = spec.grid_points;
    let mut grid = Vec::with_capacity(g);
    for j in 0..g - 1 {
        let jitter: f64 = rng.random_range(-spec.grid_jitter..=spec.grid_jitter);
        grid.push((j as f64 + 1.0 + jitter) / g as f64);
    }
    grid.push(1.0);
    let mut values: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let mut y = spec.mean.value(t);
            for (j, &score) in scores.iter().enumerate() {
                y += score * fourier_eigenfunction(j, t);
            }
            if spec.noise_sd > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                y += spec.noise_sd * z;
            }
            y
        })
        .collect();
    // Relative change r maps to a log step of -ln(1-r) downward but
    // ln(1+r) upward, so each direction gets its own cap.
    let drop_cap = -(1.0 - MAX_ORGANIC_REL_STEP).ln();
    let rise_cap = (1.0 + MAX_ORGANIC_REL_STEP).ln();
    for k in 1..values.len() {
        match spec.process {
            Process::Reset => {
                if values[k] < values[k - 1] - drop_cap {
                    values[k] = values[k - 1] - drop_cap;
                }
            }
            Process::Set => {
                if values[k] > values[k - 1] + rise_cap {
                    values[k] = values[k - 1] + rise_cap;
                }
            }
        }
    }
    RegisteredCurve {
        cycle_index,
        process: spec.process,
        switch_voltage: spec.switch_voltage,
        grid,
        values,
    }
}

/// Emits raw cycles in the ingest CSV schema: currents are exponentiated
/// log-values on voltages t·v_switch, followed by a two-sample post-switch
/// jump large enough for the 20% detection rule to recover the switch point.
pub fn generate(config: &SynthConfig) -> Result<(Vec<RawCycle>, GroundTruth), SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plan = simulate_scores(config, &mut rng);
    let mut cycles = Vec::with_capacity(config.n_cycles * config.processes.len());
    let mut offset = 0;
    let mut offsets = Vec::new();
    for p in &config.processes {
        offsets.push(offset);
        offset += p.eigenvalues.len();
    }
    for i in 0..config.n_cycles {
        for (spec, &score_offset) in config.processes.iter().zip(&offsets) {
            let scores: Vec<f64> = (0..spec.eigenvalues.len())
                .map(|j| plan.scores[(i, score_offset + j)])
                .collect();
            let curve = observe_curve(spec, &scores, i as u64, &mut rng);
            let jitter: f64 = rng.random_range(-spec.switch_jitter..=spec.switch_jitter);
            let v_switch = spec.switch_voltage * (1.0 + jitter);
            let mut samples: Vec<IvSample> = curve
                .grid
                .iter()
                .zip(&curve.values)
                .map(|(&t, &y)| IvSample {
                    voltage: t * v_switch,
                    current: y.exp(),
                })
                .collect();
            let last = samples.last().unwrap().current;
            let jump_factors: [f64; 2] = match spec.process {
                Process::Reset => [0.45, 0.30],
                Process::Set => [1.60, 2.10],
            };
            for (k, factor) in jump_factors.iter().enumerate() {
                samples.push(IvSample {
                    voltage: v_switch * (1.02 + 0.02 * k as f64),
                    current: last * factor,
                });
            }
            cycles.push(RawCycle {
                cycle_index: i as u64,
                process: spec.process,
                samples,
            });
        }
    }
    Ok((cycles, ground_truth(config, plan)))
}

/// Emits the post-ingest state directly: per-process smoothed functional
/// samples on a basis of dimension `basis_dimension`, skipping the raw
/// current/voltage round trip. The same seed draws the same curves as
/// [`generate`] up to the omitted switch-voltage jitter.
pub fn generate_samples(
    config: &SynthConfig,
    basis_dimension: usize,
) -> Result<(Vec<FunctionalSample>, GroundTruth), SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plan = simulate_scores(config, &mut rng);
    let basis = BasisSpec::cubic(basis_dimension)?;
    let mut per_process: Vec<Vec<RegisteredCurve>> =
        vec![Vec::with_capacity(config.n_cycles); config.processes.len()];
    let mut offset = 0;
    let mut offsets = Vec::new();
    for p in &config.processes {
        offsets.push(offset);
        offset += p.eigenvalues.len();
    }
    for i in 0..config.n_cycles {
        for (h, (spec, &score_offset)) in config.processes.iter().zip(&offsets).enumerate() {
            let scores: Vec<f64> = (0..spec.eigenvalues.len())
                .map(|j| plan.scores[(i, score_offset + j)])
                .collect();
            per_process[h].push(observe_curve(spec, &scores, i as u64, &mut rng));
        }
    }
    let samples = per_process
        .iter()
        .zip(&config.processes)
        .map(|(curves, spec)| smooth_curves(curves, &basis, &spec.label))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((samples, ground_truth(config, plan)))
}

/// Dense-grid FPCA of raw curve values with trapezoid quadrature weights: the
/// brute-force oracle against the basis-space implementation. Eigenpairs of
/// the weighted covariance are found through its n×n dual, which shares the
/// nonzero spectrum exactly.
pub struct GridPca {
    pub eigenvalues: Vec<f64>,
    /// Column j holds eigenfunction j evaluated on the grid.
    pub eigenfunctions: DMatrix<f64>,
    pub scores: DMatrix<f64>,
}

pub fn grid_fpca_oracle(values: &DMatrix<f64>, grid: &[f64]) -> GridPca {
    assert_eq!(values.ncols(), grid.len(), "one column per grid point");
    let g = grid.len();
    let mut weights = DVector::zeros(g);
    for i in 0..g - 1 {
        let h = grid[i + 1] - grid[i];
        weights[i] += 0.5 * h;
        weights[i + 1] += 0.5 * h;
    }
    grid_fpca_oracle_with_weights(values, &weights)
}

/// Grid oracle with explicit quadrature weights; a stacked multivariate
/// sample uses the concatenated per-process trapezoid weights.
pub fn grid_fpca_oracle_with_weights(values: &DMatrix<f64>, weights: &DVector<f64>) -> GridPca {
    let n = values.nrows();
    let g = values.ncols();
    assert_eq!(g, weights.len(), "one weight per column");
    assert!(g >= 2 && n >= 2);
    let sqrt_w = weights.map(f64::sqrt);
    let mean = values.row_mean();
    let mut centered = values.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    // Weighted data A = C·diag(√w); the dual (1/n)AAᵀ has the same nonzero
    // eigenvalues as the weighted covariance (1/n)AᵀA.
    let mut weighted = centered.clone();
    for j in 0..g {
        weighted.column_mut(j).scale_mut(sqrt_w[j]);
    }
    let dual = &weighted * weighted.transpose() / n as f64;
    let dual = (&dual + dual.transpose()) * 0.5;
    let eig = dual.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > 1e-12 * eig.eigenvalues.amax().max(1e-300))
        .collect();
    let mut eigenvalues = Vec::with_capacity(keep.len());
    let mut eigenfunctions = DMatrix::zeros(g, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        eigenvalues.push(eig.eigenvalues[i]);
        // Back-map the dual eigenvector into the weighted primal space, then
        // remove the weight scaling to get plain function values.
        let u = eig.eigenvectors.column(i);
        let mut v = weighted.transpose() * u;
        let norm = v.norm();
        if norm > 0.0 {
            v /= norm;
        }
        for row in 0..g {
            let w = sqrt_w[row];
            eigenfunctions[(row, col)] = if w > 0.0 { v[row] / w } else { 0.0 };
        }
        // Sign convention: largest-magnitude value positive.
        let mut best = 0;
        for row in 1..g {
            if eigenfunctions[(row, col)].abs() > eigenfunctions[(best, col)].abs() {
                best = row;
            }
        }
        if eigenfunctions[(best, col)] < 0.0 {
            eigenfunctions.column_mut(col).neg_mut();
        }
    }
    // Scores by weighted inner products of centered curves.
    let mut scores = DMatrix::zeros(n, keep.len());
    for i in 0..n {
        for col in 0..keep.len() {
            let mut acc = 0.0;
            for row in 0..g {
                acc += centered[(i, row)] * weights[row] * eigenfunctions[(row, col)];
            }
            scores[(i, col)] = acc;
        }
    }
    GridPca {
        eigenvalues,
        eigenfunctions,
        scores,
    }
}

/// Weighted inner product of two grid functions under the oracle's trapezoid
/// weights.
pub fn grid_inner_product(grid: &[f64], a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(grid.len(), a.len());
    assert_eq!(grid.len(), b.len());
    let mut acc = 0.0;
    for i in 1..grid.len() {
        let h = grid[i] - grid[i - 1];
        acc += 0.5 * h * (a[i - 1] * b[i - 1] + a[i] * b[i]);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest;
    use rayon::prelude::*;

    #[test]
    fn fourier_family_is_orthonormal_under_quadrature() {
        let g = 2001;
        let grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
        for j in 0..5 {
            for k in 0..5 {
                let a: Vec<f64> = grid.iter().map(|&t| fourier_eigenfunction(j, t)).collect();
                let b: Vec<f64> = grid.iter().map(|&t| fourier_eigenfunction(k, t)).collect();
                let ip = grid_inner_product(&grid, &a, &b);
                let expected = if j == k { 1.0 } else { 0.0 };
                assert!((ip - expected).abs() < 1e-6, "({j},{k}): {ip}");
            }
        }
    }

    #[test]
    fn unstable_dynamics_are_rejected() {
        let mut config = SynthConfig::bivariate_default(1);
        config.omega[0] *= 2.0;
        assert!(matches!(generate(&config), Err(SynthError::UnstableDynamics(_))));
    }

    #[test]
    fn same_seed_gives_byte_identical_csv() {
        let config = SynthConfig::bivariate_default(42);
        let (cycles_a, _) = generate(&config).unwrap();
        let (cycles_b, _) = generate(&config).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        ingest::write_cycles_csv(&cycles_a, &mut buf_a).unwrap();
        ingest::write_cycles_csv(&cycles_b, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn zero_variance_zero_noise_emits_the_mean_everywhere() {
        let mut config = SynthConfig::bivariate_default(7);
        config.n_cycles = 20;
        for p in &mut config.processes {
            p.eigenvalues = vec![0.0, 0.0];
            p.noise_sd = 0.0;
            p.grid_jitter = 0.0;
        }
        config.omega = vec![DMatrix::zeros(4, 4)];
        let (samples, _) = generate_samples(&config, 12).unwrap();
        for sample in &samples {
            let first = sample.coefficients.row(0).into_owned();
            for i in 1..sample.len() {
                let diff = (sample.coefficients.row(i) - &first).abs().max();
                assert!(diff < 1e-10, "curve {i} deviates by {diff}");
            }
        }
    }

    #[test]
    fn ingest_recovers_the_intended_switch_point() {
        let mut config = SynthConfig::bivariate_default(11);
        config.n_cycles = 30;
        let (cycles, _) = generate(&config).unwrap();
        for cycle in &cycles {
            let jump = ingest::detect_switch_point(cycle, 0.20).unwrap();
            // The two appended samples sit after the order-consistent sort,
            // so the switch point is the last organic sample.
            let spec = config
                .processes
                .iter()
                .find(|p| p.process == cycle.process)
                .unwrap();
            assert_eq!(jump, spec.grid_points, "cycle {}", cycle.cycle_index);
            let registered = ingest::register_curve(cycle, jump - 1).unwrap();
            assert!((registered.grid.last().unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_spectrum_approaches_configured_spectrum() {
        let medians: Vec<Vec<f64>> = (0..50u64)
            .into_par_iter()
            .map(|seed| {
                let mut config = SynthConfig::bivariate_default(500 + seed);
                config.n_cycles = 500;
                let (samples, _) = generate_samples(&config, 12).unwrap();
                let mut errors = Vec::new();
                for (sample, spec) in samples.iter().zip(&config.processes) {
                    let model = crate::fpca::fpca_univariate(sample).unwrap();
                    for (j, &target) in spec.eigenvalues.iter().enumerate() {
                        errors.push((model.eigenvalues[j] - target).abs() / target);
                    }
                }
                errors
            })
            .collect();
        for j in 0..4 {
            let mut errs: Vec<f64> = medians.iter().map(|e| e[j]).collect();
            errs.sort_by(f64::total_cmp);
            assert!(
                errs[25] < 0.15,
                "score {j}: median relative eigenvalue error {}",
                errs[25]
            );
        }
    }

    #[test]
    fn injected_outliers_are_flagged_by_screening() {
        let mut all_detected = 0;
        let seeds = 50u64;
        for seed in 0..seeds {
            let mut config = SynthConfig::bivariate_default(9000 + seed);
            config.n_cycles = 120;
            config.outlier_count = 3;
            config.outlier_scale = 10.0;
            let (samples, truth) = generate_samples(&config, 12).unwrap();
            let mut reports = Vec::new();
            for sample in &samples {
                reports.push(crate::screen::functional_bagplot_flags(sample, 2.58).unwrap());
            }
            let pairs: Vec<(&FunctionalSample, &crate::screen::OutlierReport)> =
                samples.iter().zip(reports.iter()).collect();
            let flagged = crate::screen::flagged_cycles(&pairs);
            if truth.outlier_cycles.iter().all(|c| flagged.contains(c)) {
                all_detected += 1;
            }
        }
        assert!(
            all_detected as f64 / seeds as f64 >= 0.95,
            "all injected outliers detected in only {all_detected}/{seeds} seeds"
        );
    }

    #[test]
    fn whiteness_holds_after_fitting_the_true_order() {
        let mut config = SynthConfig::bivariate_default(77);
        config.n_cycles = 400;
        let (_, truth) = generate_samples(&config, 12).unwrap();
        let series = crate::var::ScoreSeries::new(
            truth.scores.clone(),
            (0..4).map(|j| format!("S{j}")).collect(),
            "truth",
        );
        let model = crate::var::fit_var(&series, 1, None).unwrap();
        let residuals = crate::var::residuals(&model, &series).unwrap();
        let report = crate::diagnostics::whiteness_report(&residuals, 8, 1).unwrap();
        let significant = report.ccm_p_values.iter().filter(|&&p| p < 0.05).count();
        assert!(significant <= 2, "{significant}/8 lags significant after true-order fit");
    }

    #[test]
    fn rank_one_grid_oracle_matches_analytic_eigenvalue() {
        let g = 1001;
        let grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
        // Unit-norm curve direction and exactly centered weights.
        let c: Vec<f64> = grid.iter().map(|&t| fourier_eigenfunction(2, t)).collect();
        let a = [1.5, -0.5, -1.0, 0.75, -0.75];
        let n = a.len();
        let values = DMatrix::from_fn(n, g, |i, j| a[i] * c[j]);
        let oracle = grid_fpca_oracle(&values, &grid);
        let expected = a.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!(
            (oracle.eigenvalues[0] - expected).abs() < 1e-6,
            "{} vs {expected}",
            oracle.eigenvalues[0]
        );
        assert!(oracle.eigenvalues.get(1).is_none_or(|&l| l < 1e-10));
    }

    #[test]
    fn grid_refinement_changes_little() {
        let mut config = SynthConfig::bivariate_default(3);
        config.n_cycles = 100;
        let (samples, _) = generate_samples(&config, 12).unwrap();
        let eigen_at = |g: usize| -> Vec<f64> {
            let grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
            let values = samples[0].evaluate_on_grid(&grid).unwrap();
            // Only the structural eigenvalues; the trailing ones sit at the
            // smoothing-noise floor where relative comparisons are empty.
            grid_fpca_oracle(&values, &grid).eigenvalues[..2].to_vec()
        };
        let coarse = eigen_at(501);
        let fine = eigen_at(1001);
        for (a, b) in coarse.iter().zip(&fine) {
            assert!((a - b).abs() / b < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = SynthConfig::bivariate_default(13);
        let json = serde_json::to_string(&config).unwrap();
        let back: SynthConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_cycles, config.n_cycles);
        assert_eq!(back.omega, config.omega);
        assert_eq!(back.processes.len(), config.processes.len());
    }
}
