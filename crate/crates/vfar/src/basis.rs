//! Cubic B-spline basis on [0, 1]: construction, evaluation, exact Gram
//! matrix, and least-squares smoothing of registered curves.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RegisteredCurve;

/// Spline order (degree + 1); the basis is cubic throughout.
pub const SPLINE_ORDER: usize = 4;

/// 5-point Gauss-Legendre rule on [-1, 1]; exact for polynomials of degree
/// up to 9, which covers the degree-6 integrand of the cubic Gram matrix.
const GAUSS_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GAUSS_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("basis dimension {0} is below the spline order {SPLINE_ORDER}")]
    DimensionTooSmall(usize),
    #[error("argument {0} lies outside the basis domain [0, 1]")]
    ArgumentOutOfDomain(f64),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficientDesign(String),
    #[error("invalid basis specification: {0}")]
    InvalidSpec(String),
    #[error("invalid functional sample: {0}")]
    InvalidSample(String),
}

/// A clamped cubic B-spline basis of dimension `K` on [0, 1]. The knot vector
/// has length `K + 4`: 0 and 1 each repeated four times with `K - 4` uniform
/// interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisSpecDto", into = "BasisSpecDto")]
pub struct BasisSpec {
    dimension: usize,
    knots: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BasisSpecDto {
    #[serde(rename = "K")]
    k: usize,
    knots: Vec<f64>,
}

impl From<BasisSpec> for BasisSpecDto {
    fn from(b: BasisSpec) -> Self {
        BasisSpecDto {
            k: b.dimension,
            knots: b.knots,
        }
    }
}

impl TryFrom<BasisSpecDto> for BasisSpec {
    type Error = String;

    fn try_from(dto: BasisSpecDto) -> Result<Self, String> {
        let spec = BasisSpec {
            dimension: dto.k,
            knots: dto.knots,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

impl BasisSpec {
    /// Builds the clamped cubic basis of dimension `k` with `k - 4` equally
    /// spaced interior knots.
    pub fn cubic(k: usize) -> Result<Self, BasisError> {
        if k < SPLINE_ORDER {
            return Err(BasisError::DimensionTooSmall(k));
        }
        let interior = k - SPLINE_ORDER;
        let mut knots = Vec::with_capacity(k + SPLINE_ORDER);
        knots.extend(std::iter::repeat_n(0.0, SPLINE_ORDER));
        for j in 1..=interior {
            knots.push(j as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, SPLINE_ORDER));
        Ok(BasisSpec {
            dimension: k,
            knots,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn validate(&self) -> Result<(), BasisError> {
        let k = self.dimension;
        if k < SPLINE_ORDER {
            return Err(BasisError::DimensionTooSmall(k));
        }
        if self.knots.len() != k + SPLINE_ORDER {
            return Err(BasisError::InvalidSpec(format!(
                "expected {} knots, found {}",
                k + SPLINE_ORDER,
                self.knots.len()
            )));
        }
        if self.knots[..SPLINE_ORDER].iter().any(|&t| t != 0.0)
            || self.knots[k..].iter().any(|&t| t != 1.0)
        {
            return Err(BasisError::InvalidSpec(
                "knot vector is not clamped to [0, 1]".into(),
            ));
        }
        let interior = &self.knots[SPLINE_ORDER..k];
        if interior.windows(2).any(|w| w[0] >= w[1])
            || interior.iter().any(|&t| t <= 0.0 || t >= 1.0)
        {
            return Err(BasisError::InvalidSpec(
                "interior knots must be strictly increasing in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Index of the knot span containing `t` (right-continuous; `t = 1` maps
    /// to the last non-empty span so that the final basis value is 1 there).
    fn span(&self, t: f64) -> usize {
        let k = self.dimension;
        if t >= 1.0 {
            return k - 1;
        }
        // knots[span] <= t < knots[span + 1], span in [SPLINE_ORDER - 1, k - 1]
        let mut lo = SPLINE_ORDER - 1;
        let mut hi = k - 1;
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Evaluates all `K` basis functions at `t`. At most four entries are
    /// nonzero and the values sum to one.
    pub fn evaluate(&self, t: f64) -> Result<DVector<f64>, BasisError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(BasisError::ArgumentOutOfDomain(t));
        }
        let span = self.span(t);
        let local = self.nonzero_at(t, span);
        let mut out = DVector::zeros(self.dimension);
        for (offset, value) in local.iter().enumerate() {
            out[span + 1 - SPLINE_ORDER + offset] = *value;
        }
        Ok(out)
    }

    /// The four nonzero basis values on the span containing `t`
    /// (Cox-de Boor triangular scheme).
    fn nonzero_at(&self, t: f64, span: usize) -> [f64; SPLINE_ORDER] {
        let knots = &self.knots;
        let mut values = [0.0; SPLINE_ORDER];
        let mut left = [0.0; SPLINE_ORDER];
        let mut right = [0.0; SPLINE_ORDER];
        values[0] = 1.0;
        for j in 1..SPLINE_ORDER {
            left[j] = t - knots[span + 1 - j];
            right[j] = knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { values[r] / denom } else { 0.0 };
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        values
    }

    /// Design matrix with one row of basis values per grid point.
    pub fn design_matrix(&self, grid: &[f64]) -> Result<DMatrix<f64>, BasisError> {
        let mut design = DMatrix::zeros(grid.len(), self.dimension);
        for (i, &t) in grid.iter().enumerate() {
            let row = self.evaluate(t)?;
            design.row_mut(i).copy_from(&row.transpose());
        }
        Ok(design)
    }

    /// Gram matrix W with W[a, b] = ∫₀¹ B_a(t) B_b(t) dt, integrated exactly
    /// by per-span Gauss-Legendre quadrature.
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let k = self.dimension;
        let mut w = DMatrix::zeros(k, k);
        for span in (SPLINE_ORDER - 1)..k {
            let a = self.knots[span];
            let b = self.knots[span + 1];
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (node, weight) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS.iter()) {
                let t = mid + half * node;
                let values = self.nonzero_at(t, span);
                let first = span + 1 - SPLINE_ORDER;
                for i in 0..SPLINE_ORDER {
                    for j in 0..SPLINE_ORDER {
                        w[(first + i, first + j)] += weight * half * values[i] * values[j];
                    }
                }
            }
        }
        w
    }
}

/// Smooths one registered curve into basis coefficients by unweighted least
/// squares on the curve's own grid.
pub fn smooth_curve(curve: &RegisteredCurve, basis: &BasisSpec) -> Result<DVector<f64>, BasisError> {
    let mut distinct = curve.grid.len();
    for w in curve.grid.windows(2) {
        if w[0] == w[1] {
            distinct -= 1;
        }
    }
    if distinct < basis.dimension() {
        return Err(BasisError::RankDeficientDesign(format!(
            "{} distinct grid points for a basis of dimension {}",
            distinct,
            basis.dimension()
        )));
    }
    let design = basis.design_matrix(&curve.grid)?;
    let y = DVector::from_column_slice(&curve.values);
    let fit = crate::stats::ols(&design, &y).ok_or_else(|| {
        BasisError::RankDeficientDesign(format!(
            "design matrix rank below {} on cycle {}",
            basis.dimension(),
            curve.cycle_index
        ))
    })?;
    Ok(fit.coefficients)
}

/// A set of smoothed curves sharing one basis: row i of `coefficients` holds
/// the coefficient vector of the curve with `cycle_indices[i]`. Rows are
/// ordered by ascending cycle index; this is a time series.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "FunctionalSampleDto", into = "FunctionalSampleDto")]
pub struct FunctionalSample {
    pub basis: BasisSpec,
    pub coefficients: DMatrix<f64>,
    pub cycle_indices: Vec<u64>,
    pub label: String,
}

#[derive(Serialize, Deserialize)]
struct FunctionalSampleDto {
    basis: BasisSpec,
    process: String,
    cycle_indices: Vec<u64>,
    /// Row-major n×K coefficient matrix.
    coefficients: Vec<f64>,
}

impl From<FunctionalSample> for FunctionalSampleDto {
    fn from(s: FunctionalSample) -> Self {
        let coefficients = s
            .coefficients
            .row_iter()
            .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
            .collect();
        FunctionalSampleDto {
            basis: s.basis,
            process: s.label,
            cycle_indices: s.cycle_indices,
            coefficients,
        }
    }
}

impl TryFrom<FunctionalSampleDto> for FunctionalSample {
    type Error = String;

    fn try_from(dto: FunctionalSampleDto) -> Result<Self, String> {
        let n = dto.cycle_indices.len();
        let k = dto.basis.dimension();
        if n == 0 || dto.coefficients.len() != n * k {
            return Err(format!(
                "coefficient array of length {} does not match {n} curves x {k} basis functions",
                dto.coefficients.len()
            ));
        }
        let coefficients = DMatrix::from_row_slice(n, k, &dto.coefficients);
        FunctionalSample::new(dto.basis, coefficients, dto.cycle_indices, dto.process)
            .map_err(|e| e.to_string())
    }
}

impl FunctionalSample {
    pub fn new(
        basis: BasisSpec,
        coefficients: DMatrix<f64>,
        cycle_indices: Vec<u64>,
        label: String,
    ) -> Result<Self, BasisError> {
        if coefficients.nrows() == 0 {
            return Err(BasisError::InvalidSample("no curves".into()));
        }
        if coefficients.nrows() != cycle_indices.len() {
            return Err(BasisError::InvalidSample(format!(
                "{} coefficient rows but {} cycle indices",
                coefficients.nrows(),
                cycle_indices.len()
            )));
        }
        if coefficients.ncols() != basis.dimension() {
            return Err(BasisError::InvalidSample(format!(
                "{} coefficient columns for a basis of dimension {}",
                coefficients.ncols(),
                basis.dimension()
            )));
        }
        if cycle_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BasisError::InvalidSample(
                "cycle indices must be strictly increasing".into(),
            ));
        }
        Ok(FunctionalSample {
            basis,
            coefficients,
            cycle_indices,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Evaluates every curve on `grid`, one row per curve.
    pub fn evaluate_on_grid(&self, grid: &[f64]) -> Result<DMatrix<f64>, BasisError> {
        let design = self.basis.design_matrix(grid)?;
        Ok(&self.coefficients * design.transpose())
    }

    /// Keeps only the curves whose cycle index satisfies the predicate.
    pub fn filter_cycles<F: Fn(u64) -> bool>(&self, keep: F) -> Result<Self, BasisError> {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| keep(self.cycle_indices[i]))
            .collect();
        if rows.is_empty() {
            return Err(BasisError::InvalidSample(
                "filter removed every curve".into(),
            ));
        }
        let coefficients = DMatrix::from_fn(rows.len(), self.basis.dimension(), |i, j| {
            self.coefficients[(rows[i], j)]
        });
        let cycle_indices = rows.iter().map(|&i| self.cycle_indices[i]).collect();
        FunctionalSample::new(
            self.basis.clone(),
            coefficients,
            cycle_indices,
            self.label.clone(),
        )
    }
}

/// Smooths a batch of registered curves (all from one process) into a
/// [`FunctionalSample`]. Curves are smoothed independently and in parallel.
pub fn smooth_curves(
    curves: &[RegisteredCurve],
    basis: &BasisSpec,
    label: &str,
) -> Result<FunctionalSample, BasisError> {
    if curves.is_empty() {
        return Err(BasisError::InvalidSample("no curves to smooth".into()));
    }
    let mut sorted: Vec<&RegisteredCurve> = curves.iter().collect();
    sorted.sort_by_key(|c| c.cycle_index);
    let rows: Vec<DVector<f64>> = sorted
        .par_iter()
        .map(|curve| smooth_curve(curve, basis))
        .collect::<Result<_, _>>()?;
    let mut coefficients = DMatrix::zeros(rows.len(), basis.dimension());
    for (i, row) in rows.iter().enumerate() {
        coefficients.row_mut(i).copy_from(&row.transpose());
    }
    let cycle_indices = sorted.iter().map(|c| c.cycle_index).collect();
    FunctionalSample::new(basis.clone(), coefficients, cycle_indices, label.to_string())
}
