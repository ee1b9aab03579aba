//! Univariate and multivariate functional principal component analysis of
//! basis-represented curves.
//!
//! With coefficient rows c_i, Gram matrix W and coefficient covariance
//! S = (1/n)·CᵀC of the centered rows, the functional eigenproblem reduces to
//! the symmetric matrix eigenproblem of M = W^{1/2} S W^{1/2}: eigenfunction
//! coefficients are b_j = W^{-1/2} u_j and scores are ξ_ij = (c_i - mean)ᵀ W b_j.
//! The multivariate case stacks the per-process coefficients and uses the
//! block-diagonal Gram matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisSpec, FunctionalSample};

#[derive(Debug, Error)]
pub enum FpcaError {
    #[error("Gram matrix is numerically singular; the basis is broken")]
    SingularGram,
    #[error("cycle misalignment: {0}")]
    CycleMisalignment(String),
    #[error("all eigenvalues are zero; no variance to explain")]
    AllZeroVariance,
    #[error("q = {q} out of range (retained components: {available})")]
    QOutOfRange { q: usize, available: usize },
    #[error("need at least two curves, found {0}")]
    TooFewCurves(usize),
    #[error("threshold {0} must lie in (0, 1)")]
    InvalidThreshold(f64),
    #[error("sample/model mismatch: {0}")]
    SampleMismatch(String),
    #[error(transparent)]
    Basis(#[from] crate::basis::BasisError),
}

/// Whether a model came from per-process FPCA or joint multivariate FPCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaKind {
    Univariate,
    Multivariate,
}

/// One functional variable inside a (possibly stacked) PCA model: its label,
/// basis, and the offset of its coefficients in the stacked layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaBlock {
    pub label: String,
    pub basis: BasisSpec,
    pub offset: usize,
}

/// A fitted functional PCA model: mean, decreasing eigenvalues, eigenfunction
/// coefficients (column j holds b_j, stacked across blocks), scores (row i
/// holds the component scores of curve i), and the total variance ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "PcaModelDto", into = "PcaModelDto")]
pub struct PcaModel {
    pub kind: PcaKind,
    pub blocks: Vec<PcaBlock>,
    pub mean_coefficients: DVector<f64>,
    pub eigenvalues: Vec<f64>,
    pub eigenfunction_coefficients: DMatrix<f64>,
    pub scores: DMatrix<f64>,
    pub total_variance: f64,
    pub cycle_indices: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct PcaModelDto {
    kind: PcaKind,
    blocks: Vec<PcaBlock>,
    mean_coefficients: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// Column-major (ΣK)×J eigenfunction coefficient matrix.
    eigenfunction_coefficients: Vec<f64>,
    /// Row-major n×J score matrix.
    scores: Vec<f64>,
    total_variance: f64,
    cycle_indices: Vec<u64>,
}

impl From<PcaModel> for PcaModelDto {
    fn from(m: PcaModel) -> Self {
        PcaModelDto {
            kind: m.kind,
            blocks: m.blocks,
            mean_coefficients: m.mean_coefficients.iter().cloned().collect(),
            eigenvalues: m.eigenvalues,
            eigenfunction_coefficients: m.eigenfunction_coefficients.as_slice().to_vec(),
            scores: m
                .scores
                .row_iter()
                .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
                .collect(),
            total_variance: m.total_variance,
            cycle_indices: m.cycle_indices,
        }
    }
}

impl TryFrom<PcaModelDto> for PcaModel {
    type Error = String;

    fn try_from(dto: PcaModelDto) -> Result<Self, String> {
        let total_k: usize = dto.blocks.iter().map(|b| b.basis.dimension()).sum();
        let j = dto.eigenvalues.len();
        let n = dto.cycle_indices.len();
        if dto.mean_coefficients.len() != total_k {
            return Err("mean length does not match stacked basis dimension".into());
        }
        if dto.eigenfunction_coefficients.len() != total_k * j {
            return Err("eigenfunction coefficient array has wrong length".into());
        }
        if dto.scores.len() != n * j {
            return Err("score array has wrong length".into());
        }
        Ok(PcaModel {
            kind: dto.kind,
            blocks: dto.blocks,
            mean_coefficients: DVector::from_column_slice(&dto.mean_coefficients),
            eigenvalues: dto.eigenvalues,
            eigenfunction_coefficients: DMatrix::from_column_slice(
                total_k,
                j,
                &dto.eigenfunction_coefficients,
            ),
            scores: DMatrix::from_row_slice(n, j, &dto.scores),
            total_variance: dto.total_variance,
            cycle_indices: dto.cycle_indices,
        })
    }
}

/// Symmetric square root and inverse square root of an SPD matrix.
fn spd_sqrt_pair(w: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), FpcaError> {
    let eig = w.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 || eig.eigenvalues.iter().any(|&l| l <= 1e-12 * max) {
        return Err(FpcaError::SingularGram);
    }
    let sqrt_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.sqrt()));
    let inv_sqrt_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let v = &eig.eigenvectors;
    Ok((v * sqrt_diag * v.transpose(), v * inv_sqrt_diag * v.transpose()))
}

/// Flips the vector so that its entry of largest absolute value is positive;
/// ties break toward the lowest index.
fn apply_sign_convention(b: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..b.len() {
        if b[i].abs() > b[best].abs() {
            best = i;
        }
    }
    if b[best] < 0.0 {
        b.neg_mut();
    }
}

fn fit_pca(
    kind: PcaKind,
    blocks: Vec<PcaBlock>,
    coefficients: &DMatrix<f64>,
    w: &DMatrix<f64>,
    cycle_indices: Vec<u64>,
) -> Result<PcaModel, FpcaError> {
    let n = coefficients.nrows();
    let k = coefficients.ncols();
    if n < 2 {
        return Err(FpcaError::TooFewCurves(n));
    }
    let mean = coefficients.row_mean().transpose();
    let mut centered = coefficients.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let covariance = centered.transpose() * &centered / n as f64;
    let (w_sqrt, w_inv_sqrt) = spd_sqrt_pair(w)?;
    let m = &w_sqrt * covariance * &w_sqrt;
    // Symmetrize against round-off before the eigensolve.
    let m = (&m + m.transpose()) * 0.5;
    let total_variance = m.trace();
    let eig = m.symmetric_eigen();

    let mut components: Vec<(f64, DVector<f64>)> = (0..k)
        .map(|j| {
            let mut b = &w_inv_sqrt * eig.eigenvectors.column(j);
            apply_sign_convention(&mut b);
            (eig.eigenvalues[j].max(0.0), b)
        })
        .collect();
    components.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| {
            // Deterministic order for (near-)ties.
            for (x, y) in a.1.iter().zip(b.1.iter()) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            std::cmp::Ordering::Equal
        })
    });

    let eigenvalues: Vec<f64> = components.iter().map(|(l, _)| *l).collect();
    let mut eigenfunctions = DMatrix::zeros(k, k);
    for (j, (_, b)) in components.iter().enumerate() {
        eigenfunctions.column_mut(j).copy_from(b);
    }
    let scores = &centered * w * &eigenfunctions;

    Ok(PcaModel {
        kind,
        blocks,
        mean_coefficients: mean,
        eigenvalues,
        eigenfunction_coefficients: eigenfunctions,
        scores,
        total_variance,
        cycle_indices,
    })
}

/// FPCA of one functional variable. All K components are retained; use
/// [`choose_q`] to pick a truncation level afterwards.
pub fn fpca_univariate(sample: &FunctionalSample) -> Result<PcaModel, FpcaError> {
    let w = sample.basis.gram_matrix();
    let blocks = vec![PcaBlock {
        label: sample.label.clone(),
        basis: sample.basis.clone(),
        offset: 0,
    }];
    fit_pca(
        PcaKind::Univariate,
        blocks,
        &sample.coefficients,
        &w,
        sample.cycle_indices.clone(),
    )
}

/// Multivariate FPCA of several functional variables observed on the same
/// cycles. Coefficients are stacked row-wise and the Gram matrix is the
/// block diagonal of the per-variable Gram matrices.
pub fn fpca_multivariate(samples: &[FunctionalSample]) -> Result<PcaModel, FpcaError> {
    if samples.is_empty() {
        return Err(FpcaError::CycleMisalignment("no samples given".into()));
    }
    let n = samples[0].len();
    for s in samples.iter().skip(1) {
        if s.len() != n {
            return Err(FpcaError::CycleMisalignment(format!(
                "sample `{}` has {} curves, expected {}",
                s.label,
                s.len(),
                n
            )));
        }
        if s.cycle_indices != samples[0].cycle_indices {
            return Err(FpcaError::CycleMisalignment(format!(
                "sample `{}` covers different cycles than `{}`",
                s.label, samples[0].label
            )));
        }
    }
    let total_k: usize = samples.iter().map(|s| s.basis.dimension()).sum();
    let mut stacked = DMatrix::zeros(n, total_k);
    let mut w = DMatrix::zeros(total_k, total_k);
    let mut blocks = Vec::with_capacity(samples.len());
    let mut offset = 0;
    for s in samples {
        let k = s.basis.dimension();
        stacked.view_mut((0, offset), (n, k)).copy_from(&s.coefficients);
        w.view_mut((offset, offset), (k, k))
            .copy_from(&s.basis.gram_matrix());
        blocks.push(PcaBlock {
            label: s.label.clone(),
            basis: s.basis.clone(),
            offset,
        });
        offset += k;
    }
    fit_pca(
        PcaKind::Multivariate,
        blocks,
        &stacked,
        &w,
        samples[0].cycle_indices.clone(),
    )
}

/// Smallest q whose cumulative share of the total variance reaches
/// `threshold`.
pub fn choose_q(eigenvalues: &[f64], threshold: f64) -> Result<usize, FpcaError> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(FpcaError::InvalidThreshold(threshold));
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 || !eigenvalues.iter().any(|&l| l > 0.0) {
        return Err(FpcaError::AllZeroVariance);
    }
    let mut cumulative = 0.0;
    for (j, &l) in eigenvalues.iter().enumerate() {
        cumulative += l;
        if cumulative / total >= threshold {
            return Ok(j + 1);
        }
    }
    Ok(eigenvalues.len())
}

impl PcaModel {
    /// Number of curves the model was fitted on.
    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    /// Number of retained components.
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Coefficient rows reassembled from the truncated expansion:
    /// coefficients_i = mean + Σ_{j≤q} ξ_ij b_j, split back into one sample
    /// per block.
    pub fn reconstruct(&self, q: usize) -> Result<Vec<FunctionalSample>, FpcaError> {
        let q = self.check_q(q)?;
        self.curves_from_scores(&self.scores.columns(0, q).into_owned())
    }

    /// Maps arbitrary score rows through the truncated expansion (using as
    /// many components as `scores` has columns).
    pub fn curves_from_scores(
        &self,
        scores: &DMatrix<f64>,
    ) -> Result<Vec<FunctionalSample>, FpcaError> {
        let q = self.check_q(scores.ncols())?;
        let n = scores.nrows();
        let basis_cols = self.eigenfunction_coefficients.columns(0, q);
        let mut stacked = scores * basis_cols.transpose();
        for mut row in stacked.row_iter_mut() {
            row += self.mean_coefficients.transpose();
        }
        let cycle_indices: Vec<u64> = if n == self.n() {
            self.cycle_indices.clone()
        } else {
            (0..n as u64).collect()
        };
        self.blocks
            .iter()
            .map(|block| {
                let k = block.basis.dimension();
                let coefficients = stacked.view((0, block.offset), (n, k)).into_owned();
                FunctionalSample::new(
                    block.basis.clone(),
                    coefficients,
                    cycle_indices.clone(),
                    block.label.clone(),
                )
                .map_err(FpcaError::from)
            })
            .collect()
    }

    /// Scores of new curves on the fitted eigenbasis: ξ_j = (c - mean)ᵀ W b_j.
    /// `samples` must match the model's blocks (same order, same bases).
    pub fn project(&self, samples: &[FunctionalSample], q: usize) -> Result<DMatrix<f64>, FpcaError> {
        let q = self.check_q(q)?;
        if samples.len() != self.blocks.len() {
            return Err(FpcaError::SampleMismatch(format!(
                "{} samples for a model with {} blocks",
                samples.len(),
                self.blocks.len()
            )));
        }
        let n = samples[0].len();
        let total_k = self.mean_coefficients.len();
        let mut stacked = DMatrix::zeros(n, total_k);
        for (sample, block) in samples.iter().zip(&self.blocks) {
            if sample.basis != block.basis {
                return Err(FpcaError::SampleMismatch(format!(
                    "basis of sample `{}` differs from the fitted block",
                    sample.label
                )));
            }
            if sample.len() != n {
                return Err(FpcaError::CycleMisalignment(
                    "samples have differing curve counts".into(),
                ));
            }
            stacked
                .view_mut((0, block.offset), (n, block.basis.dimension()))
                .copy_from(&sample.coefficients);
        }
        for mut row in stacked.row_iter_mut() {
            row -= self.mean_coefficients.transpose();
        }
        let mut w = DMatrix::zeros(total_k, total_k);
        for block in &self.blocks {
            let k = block.basis.dimension();
            w.view_mut((block.offset, block.offset), (k, k))
                .copy_from(&block.basis.gram_matrix());
        }
        Ok(stacked * w * self.eigenfunction_coefficients.columns(0, q))
    }

    /// Values of the vector eigenfunctions at `t`: an H×q matrix whose entry
    /// (h, j) is f_{jh}(t), the block-h part of eigenfunction j.
    pub fn vector_eigenfunction_values(&self, t: f64, q: usize) -> Result<DMatrix<f64>, FpcaError> {
        let q = self.check_q(q)?;
        let h = self.blocks.len();
        let mut f = DMatrix::zeros(h, q);
        for (row, block) in self.blocks.iter().enumerate() {
            let basis_values = block.basis.evaluate(t)?;
            for j in 0..q {
                let b = self
                    .eigenfunction_coefficients
                    .view((block.offset, j), (block.basis.dimension(), 1));
                f[(row, j)] = basis_values.dot(&b.column(0).into_owned());
            }
        }
        Ok(f)
    }

    /// Values of the mean functions at `t`, one entry per block.
    pub fn mean_values(&self, t: f64) -> Result<DVector<f64>, FpcaError> {
        let h = self.blocks.len();
        let mut mu = DVector::zeros(h);
        for (row, block) in self.blocks.iter().enumerate() {
            let basis_values = block.basis.evaluate(t)?;
            let m = self
                .mean_coefficients
                .rows(block.offset, block.basis.dimension())
                .into_owned();
            mu[row] = basis_values.dot(&m);
        }
        Ok(mu)
    }

    fn check_q(&self, q: usize) -> Result<usize, FpcaError> {
        if q > self.n_components() {
            return Err(FpcaError::QOutOfRange {
                q,
                available: self.n_components(),
            });
        }
        Ok(q)
    }
}
