//! Discretized transformed predictors, their empirical covariances, truncated
//! eigensystems, and the per-predictor solver design `(Γ, H)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelMatrix;
use crate::linalg::sorted_symmetric_eigen;

/// Largest truncation used when none is configured.
pub const DEFAULT_MAX_TRUNCATION: usize = 50;

/// Discretized functional predictor: one row per subject, one column per grid
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorMatrix {
    values: DMatrix<f64>,
    centered: bool,
}

impl PredictorMatrix {
    pub fn new(values: DMatrix<f64>) -> Self {
        PredictorMatrix {
            values,
            centered: false,
        }
    }

    /// Subtracts column means; returns the centered matrix and the means.
    pub fn center(&self) -> (PredictorMatrix, DVector<f64>) {
        let means = column_means(&self.values);
        let mut values = self.values.clone();
        for (mut col, m) in values.column_iter_mut().zip(means.iter()) {
            col.add_scalar_mut(-m);
        }
        (
            PredictorMatrix {
                values,
                centered: true,
            },
            means,
        )
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn grid_size(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> PredictorMatrix {
        PredictorMatrix::new(self.values.select_rows(rows))
    }
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// `N⁻¹ X K^{1/2}`.
pub fn transform_predictor(x: &DMatrix<f64>, k_sqrt: &KernelMatrix) -> Result<DMatrix<f64>> {
    if x.ncols() != k_sqrt.size() {
        return Err(Error::DimensionMismatch {
            what: "predictor grid vs kernel grid",
            expected: k_sqrt.size(),
            got: x.ncols(),
        });
    }
    Ok(x * k_sqrt.values() / x.ncols() as f64)
}

/// `n⁻¹ X̃ᵀ X̃`.
pub fn empirical_cov(x_tilde: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x_tilde.nrows().max(1) as f64;
    let t = x_tilde.tr_mul(x_tilde) / n;
    (&t + t.transpose()) * 0.5
}

/// Top-`m` eigenpairs of a symmetric PSD `N × N` matrix. Eigenvectors are
/// scaled by `√N`; eigenvalues are descending and clipped at zero.
pub fn truncated_eigs(t: &DMatrix<f64>, m: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = t.nrows();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "truncation {m} must lie in 1..={n}"
        )));
    }
    let eig = sorted_symmetric_eigen(t)?;
    let b_tilde = eig.vectors.columns(0, m) * (n as f64).sqrt();
    let lambda = eig.values.rows(0, m).map(|v| v.max(0.0));
    Ok((b_tilde, lambda))
}

/// Default truncation `min(n − 1, N, 50)`.
pub fn default_truncation(n: usize, grid_size: usize) -> usize {
    n.saturating_sub(1).min(grid_size).min(DEFAULT_MAX_TRUNCATION).max(1)
}

/// θ-independent part of a design: transformed predictor and its truncated
/// eigensystem.
#[derive(Debug, Clone)]
pub struct EigenDesign {
    /// `X̃ = N⁻¹ X K^{1/2}` (n × N).
    pub x_tilde: DMatrix<f64>,
    /// `√N` times the top eigenvectors of `T = n⁻¹ X̃ᵀX̃` (N × M).
    pub b_tilde: DMatrix<f64>,
    /// Top eigenvalues of `T`, descending.
    pub lambda: DVector<f64>,
    /// `Γ = N⁻¹ X̃ B̃` (n × M).
    pub gamma: DMatrix<f64>,
}

impl EigenDesign {
    pub fn build(x: &PredictorMatrix, k_sqrt: &KernelMatrix, m: usize) -> Result<Self> {
        let n = x.n_samples();
        let grid = x.grid_size();
        if n == 0 {
            return Err(Error::invalid("design needs at least one sample"));
        }
        if m == 0 || m > n.min(grid) {
            return Err(Error::invalid(format!(
                "truncation {m} must lie in 1..={}",
                n.min(grid)
            )));
        }
        let x_tilde = transform_predictor(x.values(), k_sqrt)?;
        let t = empirical_cov(&x_tilde);
        let (b_tilde, lambda) = truncated_eigs(&t, m)?;
        let gamma = &x_tilde * &b_tilde / grid as f64;
        let design = EigenDesign {
            x_tilde,
            b_tilde,
            lambda,
            gamma,
        };
        design.check_diagonal()?;
        Ok(design)
    }

    pub fn truncation(&self) -> usize {
        self.lambda.len()
    }

    pub fn grid_size(&self) -> usize {
        self.b_tilde.nrows()
    }

    /// `(1/n) ΓᵀΓ` must equal `N⁻¹ Λ`; off-diagonal mass and diagonal
    /// mismatch are bounded by `1e-6 · max diagonal`.
    fn check_diagonal(&self) -> Result<()> {
        let n = self.gamma.nrows() as f64;
        let grid = self.grid_size() as f64;
        let g = self.gamma.tr_mul(&self.gamma) / n;
        let scale = self.lambda.max().max(0.0) / grid;
        if scale == 0.0 {
            return Ok(());
        }
        let m = self.truncation();
        for c in 0..m {
            for r in 0..m {
                let target = if r == c { self.lambda[r] / grid } else { 0.0 };
                if (g[(r, c)] - target).abs() > 1e-6 * scale {
                    return Err(Error::invalid(format!(
                        "design Gram matrix not diagonal at ({r}, {c}): {} vs {target}",
                        g[(r, c)]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Design quantities for one predictor at a fixed θ.
#[derive(Debug, Clone)]
pub struct TruncatedDesign {
    pub eigen: Arc<EigenDesign>,
    pub theta: f64,
    /// Diagonal of `H = N⁻¹ Λ + θ I`.
    pub h_diag: DVector<f64>,
}

impl TruncatedDesign {
    pub fn new(eigen: Arc<EigenDesign>, theta: f64) -> Result<Self> {
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::invalid(format!("theta must be positive, got {theta}")));
        }
        let grid = eigen.grid_size() as f64;
        let h_diag = eigen.lambda.map(|l| l / grid + theta);
        Ok(TruncatedDesign {
            eigen,
            theta,
            h_diag,
        })
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.eigen.gamma
    }

    pub fn truncation(&self) -> usize {
        self.eigen.truncation()
    }

    /// Grid curve `f = B̃ H^{-1/2} b` for transformed coordinates `b`.
    pub fn curve_from_b(&self, b: &DVector<f64>) -> DVector<f64> {
        let c = b.zip_map(&self.h_diag, |bi, h| bi / h.sqrt());
        &self.eigen.b_tilde * c
    }
}

/// `N⁻¹ X K^{1/2}`, eigensystem, `Γ` and `H` for one predictor.
pub fn assemble_design(
    x: &PredictorMatrix,
    k_sqrt: &KernelMatrix,
    m: usize,
    theta: f64,
) -> Result<TruncatedDesign> {
    TruncatedDesign::new(Arc::new(EigenDesign::build(x, k_sqrt, m)?), theta)
}

/// Null-space scores `Z̃ = N⁻¹ X Φ̃`.
pub fn null_scores(x: &DMatrix<f64>, phi_tilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != phi_tilde.nrows() {
        return Err(Error::DimensionMismatch {
            what: "predictor grid vs null basis grid",
            expected: phi_tilde.nrows(),
            got: x.ncols(),
        });
    }
    Ok(x * phi_tilde / x.ncols() as f64)
}
