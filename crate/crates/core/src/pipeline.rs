//! Two-stage estimation: functional elastic-net selection (Step-One) followed
//! by simple/complex form identification (Step-Two), plus the fENet and
//! ridge-refit baselines and coefficient-curve reconstruction.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{psd_sqrt, KernelKind, KernelMatrix, KernelSpec, KernelSplit};
use crate::linalg::sorted_symmetric_eigen;
use crate::operators::{
    default_truncation, null_scores, transform_predictor, EigenDesign, PredictorMatrix, TruncatedDesign,
};
use crate::solver::{kkt_residual, Block, BlockCoefficients, BlockProblem, PreparedProblem, SolverConfig, SweepRecord};
use crate::tuning::{self, FoldSet, TuningGrid, TuningRecord};

/// Final fits are tightened until the KKT residual drops below this.
pub const KKT_TARGET: f64 = 1e-6;

/// Tightest outer tolerance tried while polishing.
const POLISH_FLOOR: f64 = 1e-12;

/// Grid matrices and square roots derived from one kernel.
#[derive(Debug, Clone)]
pub struct PreparedKernel {
    pub spec: KernelSpec,
    /// `K^{1/2}` on the grid.
    pub full_sqrt: KernelMatrix,
    pub split: Option<KernelSplit>,
    /// `K₁^{1/2}` on the grid.
    pub complement_sqrt: Option<KernelMatrix>,
    /// `Φ̃`: `√N` times the top `M₀` eigenvectors of the `K₀` grid matrix.
    pub null_basis: Option<DMatrix<f64>>,
}

impl PreparedKernel {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        let full = spec.full_matrix()?;
        let full_sqrt = psd_sqrt(&full)?;
        let (split, complement_sqrt, null_basis) = match spec.kind {
            KernelKind::GaussianRbf { .. } => (None, None, None),
            _ => {
                let split = spec.split()?;
                let k1 = psd_sqrt(&split.complement)?;
                let eig = sorted_symmetric_eigen(split.null_part.values())?;
                let n = spec.grid_size as f64;
                let phi = eig.vectors.columns(0, split.null_dim) * n.sqrt();
                (Some(split), Some(k1), Some(phi))
            }
        };
        Ok(PreparedKernel {
            spec,
            full_sqrt,
            split,
            complement_sqrt,
            null_basis,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.spec.grid_size
    }

    pub fn null_dim(&self) -> Option<usize> {
        self.split.as_ref().map(|s| s.null_dim)
    }

    fn step_two_parts(&self) -> Result<(&DMatrix<f64>, &KernelMatrix)> {
        match (&self.null_basis, &self.complement_sqrt) {
            (Some(phi), Some(k1)) => Ok((phi, k1)),
            _ => Err(Error::invalid(
                "kernel has no null space; form identification needs a split kernel",
            )),
        }
    }
}

/// One shared kernel, or one kernel per predictor.
#[derive(Debug, Clone)]
pub struct KernelBank {
    kernels: Vec<Arc<PreparedKernel>>,
}

impl KernelBank {
    pub fn shared(kernel: PreparedKernel) -> Self {
        KernelBank {
            kernels: vec![Arc::new(kernel)],
        }
    }

    pub fn per_predictor(kernels: Vec<PreparedKernel>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::invalid("kernel list is empty"));
        }
        Ok(KernelBank {
            kernels: kernels.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn get(&self, j: usize) -> &PreparedKernel {
        if self.kernels.len() == 1 {
            &self.kernels[0]
        } else {
            &self.kernels[j]
        }
    }

    pub fn check(&self, p: usize, grid_size: usize) -> Result<()> {
        if self.kernels.len() != 1 && self.kernels.len() != p {
            return Err(Error::DimensionMismatch {
                what: "number of kernels vs predictors",
                expected: p,
                got: self.kernels.len(),
            });
        }
        for k in &self.kernels {
            if k.grid_size() != grid_size {
                return Err(Error::DimensionMismatch {
                    what: "kernel grid vs predictor grid",
                    expected: grid_size,
                    got: k.grid_size(),
                });
            }
        }
        Ok(())
    }
}

/// Raw predictors (each `n × N`) and response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub predictors: Vec<DMatrix<f64>>,
    pub response: DVector<f64>,
}

impl Dataset {
    pub fn new(predictors: Vec<DMatrix<f64>>, response: DVector<f64>) -> Result<Self> {
        let first = predictors
            .first()
            .ok_or_else(|| Error::invalid("at least one predictor is required"))?;
        let (n, grid) = first.shape();
        if grid == 0 {
            return Err(Error::invalid("predictor grid is empty"));
        }
        for x in &predictors {
            if x.shape() != (n, grid) {
                return Err(Error::DimensionMismatch {
                    what: "predictor shape (rows)",
                    expected: n,
                    got: x.nrows(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("predictor contains non-finite values"));
            }
        }
        if response.len() != n {
            return Err(Error::DimensionMismatch {
                what: "response length vs predictor rows",
                expected: n,
                got: response.len(),
            });
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("response contains non-finite values"));
        }
        if n < 2 {
            return Err(Error::invalid("need at least two observations"));
        }
        Ok(Dataset { predictors, response })
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn p(&self) -> usize {
        self.predictors.len()
    }

    pub fn grid_size(&self) -> usize {
        self.predictors[0].ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            predictors: self.predictors.iter().map(|x| x.select_rows(rows)).collect(),
            response: self.response.select_rows(rows),
        }
    }

    pub fn center(&self) -> CenteredData {
        let (predictors, x_means) = self
            .predictors
            .iter()
            .map(|x| PredictorMatrix::new(x.clone()).center())
            .unzip();
        let y_mean = self.response.mean();
        CenteredData {
            predictors,
            x_means,
            y: self.response.add_scalar(-y_mean),
            y_mean,
        }
    }
}

/// Column-centered predictors and centered response with the removed means.
#[derive(Debug, Clone)]
pub struct CenteredData {
    pub predictors: Vec<PredictorMatrix>,
    pub x_means: Vec<DVector<f64>>,
    pub y: DVector<f64>,
    pub y_mean: f64,
}

impl CenteredData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.predictors.len()
    }

    pub fn grid_size(&self) -> usize {
        self.predictors[0].grid_size()
    }

    /// New observations centered with these (training) means.
    pub fn center_new(&self, j: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (mut col, m) in out.column_iter_mut().zip(self.x_means[j].iter()) {
            col.add_scalar_mut(-m);
        }
        out
    }
}

/// Linear predictor `ŷ = ȳ + Σ_j N⁻¹ (X_j − x̄_j) β̂_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub y_mean: f64,
    pub x_means: Vec<DVector<f64>>,
    /// `(predictor, β̂ on the grid)` for nonzero terms, ascending.
    pub terms: Vec<(usize, DVector<f64>)>,
}

impl FittedModel {
    pub fn null(data: &CenteredData) -> Self {
        FittedModel {
            y_mean: data.y_mean,
            x_means: data.x_means.clone(),
            terms: Vec::new(),
        }
    }

    pub fn predict(&self, predictors: &[DMatrix<f64>]) -> Result<DVector<f64>> {
        let n = predictors.first().map(|x| x.nrows()).unwrap_or(0);
        let mut y = DVector::from_element(n, self.y_mean);
        for (j, beta) in &self.terms {
            let x = predictors
                .get(*j)
                .ok_or_else(|| Error::invalid(format!("predictor {} missing", j + 1)))?;
            if x.ncols() != beta.len() {
                return Err(Error::DimensionMismatch {
                    what: "predictor grid vs coefficient curve",
                    expected: beta.len(),
                    got: x.ncols(),
                });
            }
            let grid = x.ncols() as f64;
            y += x * beta / grid;
            y.add_scalar_mut(-self.x_means[*j].dot(beta) / grid);
        }
        Ok(y)
    }

    pub fn selected(&self) -> Vec<usize> {
        self.terms.iter().map(|(j, _)| *j).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub sweeps: usize,
    pub kkt_max: f64,
    pub objective: f64,
    /// Extra tightening rounds needed to meet the KKT target.
    pub polish_rounds: usize,
}

/// Fits, then re-fits from the previous solution with a tenfold tighter
/// outer tolerance until the KKT residual is at most `KKT_TARGET`.
pub(crate) fn certified_fit(
    problem: &BlockProblem,
    config: &SolverConfig,
    warm: Option<&BlockCoefficients>,
) -> Result<(BlockCoefficients, Vec<SweepRecord>, FitDiagnostics)> {
    let prepared = PreparedProblem::new(problem, config.theta)?;
    let mut cfg = *config;
    let mut fit = prepared.fit(&cfg, warm)?;
    let mut sweeps = fit.sweeps;
    let mut rounds = 0;
    loop {
        let kkt = kkt_residual(problem, &fit.coefficients, config);
        let exhausted = cfg.outer_tol <= POLISH_FLOOR;
        if kkt.max <= KKT_TARGET || exhausted {
            if kkt.max > KKT_TARGET {
                warn!("KKT residual {:.3e} above target after tightening", kkt.max);
            }
            let diagnostics = FitDiagnostics {
                sweeps,
                kkt_max: kkt.max,
                objective: fit.objective(),
                polish_rounds: rounds,
            };
            return Ok((fit.coefficients, fit.trace, diagnostics));
        }
        cfg.outer_tol = (cfg.outer_tol / 10.0).max(POLISH_FLOOR);
        rounds += 1;
        match prepared.fit(&cfg, Some(&fit.coefficients)) {
            Ok(next) => {
                sweeps += next.sweeps;
                fit = next;
            }
            Err(e) => {
                warn!("polishing stopped at tolerance {:.0e}: {e}", cfg.outer_tol);
                cfg.outer_tol = POLISH_FLOOR;
            }
        }
    }
}

/// Eigen designs of every predictor transformed by `K^{1/2}`.
pub fn stage_one_designs(data: &CenteredData, kernels: &KernelBank, truncation: usize) -> Result<Vec<Arc<EigenDesign>>> {
    kernels.check(data.p(), data.grid_size())?;
    data.predictors
        .par_iter()
        .enumerate()
        .map(|(j, x)| Ok(Arc::new(EigenDesign::build(x, &kernels.get(j).full_sqrt, truncation)?)))
        .collect()
}

/// `max_j Λ_{j1} / N`, the operator-scale leading eigenvalue used to scale θ.
pub fn theta_scale(designs: &[Arc<EigenDesign>]) -> f64 {
    designs
        .iter()
        .map(|d| d.lambda[0] / d.grid_size() as f64)
        .fold(0.0, f64::max)
}

pub fn block_problem(
    designs: &[Arc<EigenDesign>],
    theta: f64,
    y: &DVector<f64>,
    parametric: Option<DMatrix<f64>>,
) -> Result<BlockProblem> {
    let blocks = designs
        .iter()
        .map(|d| {
            let td = TruncatedDesign::new(d.clone(), theta)?;
            Ok(Block {
                gamma: d.gamma.clone(),
                h_diag: td.h_diag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockProblem {
        response: y.clone(),
        blocks,
        parametric_design: parametric,
    })
}

/// Scores of new centered observations in a design's eigen coordinates,
/// `N⁻¹ (N⁻¹ X K^{1/2}) B̃`.
pub fn project_scores(x_centered: &DMatrix<f64>, k_sqrt: &KernelMatrix, design: &EigenDesign) -> Result<DMatrix<f64>> {
    let xt = transform_predictor(x_centered, k_sqrt)?;
    Ok(xt * &design.b_tilde / design.grid_size() as f64)
}

#[derive(Debug, Clone)]
pub struct StageOneResult {
    pub selected: Vec<usize>,
    pub b: Vec<DVector<f64>>,
    /// `f̂ = B̃ H^{-1/2} b̂` on the grid, per predictor.
    pub f_hat: Vec<DVector<f64>>,
    /// `β̂ = N⁻¹ K^{1/2} f̂` on the grid, per predictor.
    pub beta_hat: Vec<DVector<f64>>,
    pub config: SolverConfig,
    pub truncation: usize,
    pub diagnostics: FitDiagnostics,
    pub coefficients: BlockCoefficients,
    /// Sweeps of the last polishing fit.
    pub trace: Vec<SweepRecord>,
}

impl StageOneResult {
    pub fn model(&self, data: &CenteredData) -> FittedModel {
        FittedModel {
            y_mean: data.y_mean,
            x_means: data.x_means.clone(),
            terms: self
                .selected
                .iter()
                .map(|&j| (j, self.beta_hat[j].clone()))
                .collect(),
        }
    }
}

pub fn run_step1(
    data: &CenteredData,
    kernels: &KernelBank,
    truncation: usize,
    config: &SolverConfig,
) -> Result<StageOneResult> {
    let designs = stage_one_designs(data, kernels, truncation)?;
    step_one_from_designs(&designs, kernels, &data.y, config, None)
}

pub fn step_one_from_designs(
    designs: &[Arc<EigenDesign>],
    kernels: &KernelBank,
    y: &DVector<f64>,
    config: &SolverConfig,
    warm: Option<&BlockCoefficients>,
) -> Result<StageOneResult> {
    let problem = block_problem(designs, config.theta, y, None)?;
    let (coefficients, trace, diagnostics) = certified_fit(&problem, config, warm)?;
    let mut selected = Vec::new();
    let mut f_hat = Vec::with_capacity(designs.len());
    let mut beta_hat = Vec::with_capacity(designs.len());
    for (j, (d, b)) in designs.iter().zip(&coefficients.b).enumerate() {
        let grid = d.grid_size();
        if coefficients.active[j] {
            selected.push(j);
            let f = d.b_tilde.clone() * b.zip_map(&problem.blocks[j].h_diag, |bi, h| bi / h.sqrt());
            beta_hat.push(kernels.get(j).full_sqrt.values() * &f / grid as f64);
            f_hat.push(f);
        } else {
            f_hat.push(DVector::zeros(grid));
            beta_hat.push(DVector::zeros(grid));
        }
    }
    debug!(
        "step one: {} selected, {} sweeps, KKT {:.2e}",
        selected.len(),
        diagnostics.sweeps,
        diagnostics.kkt_max
    );
    Ok(StageOneResult {
        selected,
        b: coefficients.b.clone(),
        f_hat,
        beta_hat,
        config: *config,
        truncation: designs.first().map(|d| d.truncation()).unwrap_or(0),
        diagnostics,
        coefficients,
        trace,
    })
}

/// Step-Two inputs restricted to the selected predictors.
#[derive(Debug, Clone)]
pub struct StageTwoDesign {
    pub selected: Vec<usize>,
    pub null_dims: Vec<usize>,
    /// `[Z̃_j]_{j ∈ Ŝ}` with `Z̃_j = N⁻¹ X_j Φ̃_j`.
    pub z: DMatrix<f64>,
    /// Eigen designs of `N⁻¹ X_j K₁^{1/2}`.
    pub complement: Vec<Arc<EigenDesign>>,
}

/// Complement truncation `M − M₀`, at least one and within `min(n, N)`.
pub fn complement_truncation(truncation: usize, m0: usize, n: usize, grid: usize) -> usize {
    truncation.saturating_sub(m0).max(1).min(n.min(grid))
}

pub fn stage_two_design(
    data: &CenteredData,
    kernels: &KernelBank,
    selected: &[usize],
    truncation: usize,
) -> Result<StageTwoDesign> {
    kernels.check(data.p(), data.grid_size())?;
    let n = data.n();
    let null_dims = selected
        .iter()
        .map(|&j| {
            kernels
                .get(j)
                .null_dim()
                .ok_or_else(|| Error::invalid("kernel has no null space"))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = null_dims.iter().sum();
    if total > n {
        return Err(Error::invalid(format!(
            "M0·|S| = {total} exceeds the sample size {n}; the null-space fit is not identifiable"
        )));
    }
    let parts = selected
        .par_iter()
        .map(|&j| {
            let kernel = kernels.get(j);
            let (phi, k1) = kernel.step_two_parts()?;
            let x = &data.predictors[j];
            let z = null_scores(x.values(), phi)?;
            let m1 = complement_truncation(truncation, phi.ncols(), n, x.grid_size());
            Ok((z, Arc::new(EigenDesign::build(x, k1, m1)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut z = DMatrix::zeros(n, total);
    let mut col = 0;
    let mut complement = Vec::with_capacity(parts.len());
    for (zj, design) in parts {
        z.columns_mut(col, zj.ncols()).copy_from(&zj);
        col += zj.ncols();
        complement.push(design);
    }
    Ok(StageTwoDesign {
        selected: selected.to_vec(),
        null_dims,
        z,
        complement,
    })
}

#[derive(Debug, Clone)]
pub struct StageTwoResult {
    pub selected: Vec<usize>,
    pub simple_set: Vec<usize>,
    pub complex_set: Vec<usize>,
    /// Null-space coefficients, one vector per selected predictor.
    pub a: Vec<DVector<f64>>,
    /// Complement block coefficients, one per selected predictor.
    pub b1: Vec<DVector<f64>>,
    /// `Φ̃ â` per selected predictor.
    pub beta_null: Vec<DVector<f64>>,
    /// `N⁻¹ K₁^{1/2} B̃₁ H₁^{-1/2} b̂⁽¹⁾` per selected predictor.
    pub beta_complex: Vec<DVector<f64>>,
    pub beta_hat: Vec<DVector<f64>>,
    pub config: SolverConfig,
    pub diagnostics: Option<FitDiagnostics>,
    pub coefficients: Option<BlockCoefficients>,
    pub trace: Vec<SweepRecord>,
}

impl StageTwoResult {
    pub fn empty(config: &SolverConfig) -> Self {
        StageTwoResult {
            selected: Vec::new(),
            simple_set: Vec::new(),
            complex_set: Vec::new(),
            a: Vec::new(),
            b1: Vec::new(),
            beta_null: Vec::new(),
            beta_complex: Vec::new(),
            beta_hat: Vec::new(),
            config: *config,
            diagnostics: None,
            coefficients: None,
            trace: Vec::new(),
        }
    }

    pub fn model(&self, data: &CenteredData) -> FittedModel {
        FittedModel {
            y_mean: data.y_mean,
            x_means: data.x_means.clone(),
            terms: self
                .selected
                .iter()
                .zip(&self.beta_hat)
                .map(|(&j, b)| (j, b.clone()))
                .collect(),
        }
    }
}

pub fn run_step2(
    data: &CenteredData,
    kernels: &KernelBank,
    selected: &[usize],
    truncation: usize,
    config: &SolverConfig,
) -> Result<StageTwoResult> {
    if selected.is_empty() {
        return Ok(StageTwoResult::empty(config));
    }
    let design = stage_two_design(data, kernels, selected, truncation)?;
    step_two_from_design(&design, kernels, &data.y, config, None)
}

pub fn step_two_problem(design: &StageTwoDesign, y: &DVector<f64>, theta: f64) -> Result<BlockProblem> {
    block_problem(&design.complement, theta, y, Some(design.z.clone()))
}

pub fn step_two_from_design(
    design: &StageTwoDesign,
    kernels: &KernelBank,
    y: &DVector<f64>,
    config: &SolverConfig,
    warm: Option<&BlockCoefficients>,
) -> Result<StageTwoResult> {
    if design.selected.is_empty() {
        return Ok(StageTwoResult::empty(config));
    }
    let problem = step_two_problem(design, y, config.theta)?;
    let (coefficients, trace, diagnostics) = certified_fit(&problem, config, warm)?;
    let a_all = coefficients
        .a
        .clone()
        .ok_or_else(|| Error::invalid("Step-Two fit lost its parametric block"))?;

    let mut out = StageTwoResult::empty(config);
    out.selected = design.selected.clone();
    let mut offset = 0;
    for (pos, &j) in design.selected.iter().enumerate() {
        let kernel = kernels.get(j);
        let (phi, k1) = kernel.step_two_parts()?;
        let m0 = design.null_dims[pos];
        let a = a_all.rows(offset, m0).into_owned();
        offset += m0;
        let d = &design.complement[pos];
        let b = coefficients.b[pos].clone();
        let grid = d.grid_size() as f64;
        let beta0 = phi * &a;
        let beta1 = if coefficients.active[pos] {
            out.complex_set.push(j);
            let c = b.zip_map(&problem.blocks[pos].h_diag, |bi, h| bi / h.sqrt());
            k1.values() * (&d.b_tilde * c) / grid
        } else {
            out.simple_set.push(j);
            DVector::zeros(d.grid_size())
        };
        out.beta_hat.push(&beta0 + &beta1);
        out.beta_null.push(beta0);
        out.beta_complex.push(beta1);
        out.a.push(a);
        out.b1.push(b);
    }
    debug!(
        "step two: {} simple, {} complex, KKT {:.2e}",
        out.simple_set.len(),
        out.complex_set.len(),
        diagnostics.kkt_max
    );
    out.diagnostics = Some(diagnostics);
    out.coefficients = Some(coefficients);
    out.trace = trace;
    Ok(out)
}

/// Ridge solutions `c(λ₂) = (ΓᵀΓ/n + λ₂ I)⁻¹ Γᵀy/n` for several `λ₂`, using
/// one eigendecomposition of the smaller of `ΓᵀΓ/n` and `ΓΓᵀ/n`.
pub fn ridge_path(gamma: &DMatrix<f64>, y: &DVector<f64>, lambdas: &[f64]) -> Result<Vec<DVector<f64>>> {
    let (n, d) = gamma.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            what: "ridge response length",
            expected: n,
            got: y.len(),
        });
    }
    if lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::invalid("ridge penalties must be positive"));
    }
    let nf = n as f64;
    if d <= n {
        let eig = sorted_symmetric_eigen(&(gamma.tr_mul(gamma) / nf))?;
        let proj = eig.vectors.tr_mul(&(gamma.tr_mul(y) / nf));
        Ok(lambdas
            .iter()
            .map(|&l| {
                let scaled = proj.zip_map(&eig.values, |v, e| v / (e.max(0.0) + l));
                &eig.vectors * scaled
            })
            .collect())
    } else {
        // c = Γᵀ (ΓΓᵀ/n + λ₂ I)⁻¹ y / n
        let eig = sorted_symmetric_eigen(&(gamma * gamma.transpose() / nf))?;
        let proj = eig.vectors.tr_mul(y);
        Ok(lambdas
            .iter()
            .map(|&l| {
                let scaled = proj.zip_map(&eig.values, |v, e| v / (e.max(0.0) + l));
                gamma.tr_mul(&(&eig.vectors * scaled)) / nf
            })
            .collect())
    }
}

/// Concatenated `[Γ_j]_{j ∈ S}`.
pub fn stack_gamma(designs: &[Arc<EigenDesign>], selected: &[usize]) -> DMatrix<f64> {
    let n = designs[selected[0]].gamma.nrows();
    let total: usize = selected.iter().map(|&j| designs[j].truncation()).sum();
    let mut g = DMatrix::zeros(n, total);
    let mut col = 0;
    for &j in selected {
        let m = designs[j].truncation();
        g.columns_mut(col, m).copy_from(&designs[j].gamma);
        col += m;
    }
    g
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub selected: Vec<usize>,
    pub lambda2: f64,
    /// `c_j = H_j^{-1/2} b_j` per selected predictor.
    pub c: Vec<DVector<f64>>,
    pub beta_hat: Vec<DVector<f64>>,
    pub kkt_max: f64,
}

impl RefineResult {
    pub fn model(&self, data: &CenteredData) -> FittedModel {
        FittedModel {
            y_mean: data.y_mean,
            x_means: data.x_means.clone(),
            terms: self
                .selected
                .iter()
                .zip(&self.beta_hat)
                .map(|(&j, b)| (j, b.clone()))
                .collect(),
        }
    }
}

/// Refit of the Step-One objective on `Ŝ` with `λ₁ = 0` and the given `λ₂`
/// (a ridge regression in the eigen coordinates, independent of θ).
pub fn fenet_refine(
    designs: &[Arc<EigenDesign>],
    kernels: &KernelBank,
    y: &DVector<f64>,
    selected: &[usize],
    lambda2: f64,
) -> Result<RefineResult> {
    if selected.is_empty() {
        return Ok(RefineResult {
            selected: Vec::new(),
            lambda2,
            c: Vec::new(),
            beta_hat: Vec::new(),
            kkt_max: 0.0,
        });
    }
    let gamma = stack_gamma(designs, selected);
    let c_all = ridge_path(&gamma, y, &[lambda2])?.remove(0);

    // KKT check in the solver's parameterization with an arbitrary θ.
    let theta = 1.0;
    let sub: Vec<Arc<EigenDesign>> = selected.iter().map(|&j| designs[j].clone()).collect();
    let problem = block_problem(&sub, theta, y, None)?;
    let mut coeffs = BlockCoefficients {
        b: Vec::new(),
        a: None,
        active: Vec::new(),
    };
    let mut c = Vec::new();
    let mut beta_hat = Vec::new();
    let mut offset = 0;
    for (pos, &j) in selected.iter().enumerate() {
        let d = &designs[j];
        let m = d.truncation();
        let cj = c_all.rows(offset, m).into_owned();
        offset += m;
        let b = cj.zip_map(&problem.blocks[pos].h_diag, |ci, h| ci * h.sqrt());
        coeffs.active.push(b.iter().any(|&v| v != 0.0));
        coeffs.b.push(b);
        let f = &d.b_tilde * &cj;
        beta_hat.push(kernels.get(j).full_sqrt.values() * f / d.grid_size() as f64);
        c.push(cj);
    }
    let cfg = SolverConfig {
        lambda1: 0.0,
        lambda2,
        theta,
        ..SolverConfig::default()
    };
    let kkt_max = kkt_residual(&problem, &coeffs, &cfg).max;
    Ok(RefineResult {
        selected: selected.to_vec(),
        lambda2,
        c,
        beta_hat,
        kkt_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fenet,
    FenetRefine,
    MofiFix,
    MofiOptim,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fenet, Method::FenetRefine, Method::MofiFix, Method::MofiOptim];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fenet => "fenet",
            Method::FenetRefine => "fenet-refine",
            Method::MofiFix => "mofi-fix",
            Method::MofiOptim => "mofi-optim",
        }
    }

    pub fn identifies_form(self) -> bool {
        matches!(self, Method::MofiFix | Method::MofiOptim)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// How Step-Two penalties are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Reuse the Step-One `(λ, α)`.
    Fix,
    /// Cross-validate `(λ̄, ᾱ)` with `λ̄ ≤ λ`.
    Optim,
}

impl Strategy {
    pub fn method(self) -> Method {
        match self {
            Strategy::Fix => Method::MofiFix,
            Strategy::Optim => Method::MofiOptim,
        }
    }
}

/// Step-One penalties given directly instead of by cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPenalty {
    pub lambda: f64,
    pub alpha: f64,
    pub theta: f64,
    pub truncation: Option<usize>,
}

/// Step-One threshold factor used by the pipeline.
pub const DEFAULT_KAPPA: f64 = 10.0;
pub const DEFAULT_STEP_TWO_KAPPA: f64 = 20.0;

/// Solver defaults with the pipeline's κ.
pub fn default_solver() -> SolverConfig {
    SolverConfig {
        kappa: DEFAULT_KAPPA,
        ..SolverConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub grid: TuningGrid,
    /// Tolerances, iteration limits and κ; penalties here are ignored.
    pub solver: SolverConfig,
    pub fixed: Option<FixedPenalty>,
    /// Threshold factor κ̄ for the complement blocks in Step-Two.
    pub step_two_kappa: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: TuningGrid::default(),
            solver: default_solver(),
            fixed: None,
            step_two_kappa: DEFAULT_STEP_TWO_KAPPA,
        }
    }
}

impl PipelineConfig {
    pub fn step_two_solver(&self) -> SolverConfig {
        SolverConfig {
            kappa: self.step_two_kappa,
            ..self.solver
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let probe = SolverConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            theta: 1.0,
            ..self.solver
        };
        probe.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.step_two_kappa >= 1.0 && self.step_two_kappa.is_finite()) {
            return Err(Error::Config(format!(
                "step_two_kappa must be at least 1, got {}",
                self.step_two_kappa
            )));
        }
        if let Some(f) = &self.fixed {
            if !(f.lambda >= 0.0 && f.lambda.is_finite()) {
                return Err(Error::Config(format!("fixed lambda must be nonnegative, got {}", f.lambda)));
            }
            if !(f.alpha > 0.0 && f.alpha <= 1.0) {
                return Err(Error::Config(format!("fixed alpha must lie in (0, 1], got {}", f.alpha)));
            }
            if !(f.theta > 0.0 && f.theta.is_finite()) {
                return Err(Error::Config(format!("fixed theta must be positive, got {}", f.theta)));
            }
            if f.truncation == Some(0) {
                return Err(Error::Config("fixed truncation must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub model: FittedModel,
    pub selected: Vec<usize>,
    pub simple_set: Option<Vec<usize>>,
    pub complex_set: Option<Vec<usize>>,
    pub step_two: Option<StageTwoResult>,
    pub refine: Option<RefineResult>,
    pub tuning: Option<TuningRecord>,
    pub kkt_max: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub centered: CenteredData,
    pub step_one: StageOneResult,
    pub step_one_tuning: Option<TuningRecord>,
    pub methods: Vec<MethodResult>,
}

impl PipelineOutput {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }
}

fn config_with(base: &SolverConfig, lambda: f64, alpha: f64, theta: f64) -> SolverConfig {
    SolverConfig {
        theta,
        ..*base
    }
    .with_penalty(lambda, alpha)
}

/// Runs Step-One (tuned or fixed) once and derives every requested method
/// from it. Fold assignments come from `grid.seed`.
pub fn run_pipeline(
    data: &Dataset,
    kernels: &KernelBank,
    cfg: &PipelineConfig,
    methods: &[Method],
) -> Result<PipelineOutput> {
    cfg.validate()?;
    kernels.check(data.p(), data.grid_size())?;
    let centered = data.center();
    let needs_folds = cfg.fixed.is_none()
        || methods
            .iter()
            .any(|m| matches!(m, Method::FenetRefine | Method::MofiOptim));
    let folds = if needs_folds {
        Some(FoldSet::new(data, cfg.grid.folds, cfg.grid.seed)?)
    } else {
        None
    };

    // Step-One.
    let (step_one, step_one_tuning, lambda_path, full_designs, mut fold_designs) = match &cfg.fixed {
        Some(f) => {
            let m = f
                .truncation
                .unwrap_or_else(|| default_truncation(data.n(), data.grid_size()));
            let designs = stage_one_designs(&centered, kernels, m)?;
            let solver = config_with(&cfg.solver, f.lambda, f.alpha, f.theta);
            let s1 = step_one_from_designs(&designs, kernels, &centered.y, &solver, None)?;
            (s1, None, None, designs, None)
        }
        None => {
            let folds = folds.as_ref().expect("folds are built when tuning");
            let tuned = tuning::tune_step_one(data, &centered, folds, kernels, &cfg.grid, &cfg.solver)?;
            let rec = &tuned.record;
            let solver = config_with(&cfg.solver, rec.lambda, rec.alpha, rec.theta);
            let s1 = step_one_from_designs(&tuned.full_designs, kernels, &centered.y, &solver, None)?;
            (
                s1,
                Some(tuned.record),
                Some(tuned.lambda_path),
                tuned.full_designs,
                Some(tuned.fold_designs),
            )
        }
    };
    if step_one.selected.is_empty() {
        warn!("Step-One selected no predictors; every method returns the null model");
    }

    let step_two_base = cfg.step_two_solver();
    let mut results = Vec::new();
    for &method in methods {
        let res = match method {
            Method::Fenet => MethodResult {
                method,
                model: step_one.model(&centered),
                selected: step_one.selected.clone(),
                simple_set: None,
                complex_set: None,
                step_two: None,
                refine: None,
                tuning: step_one_tuning.clone(),
                kkt_max: step_one.diagnostics.kkt_max,
            },
            Method::FenetRefine => {
                let folds = folds.as_ref().expect("folds are built for refinement");
                let (refine, record) = if step_one.selected.is_empty() {
                    (fenet_refine(&full_designs, kernels, &centered.y, &[], 0.0)?, None)
                } else {
                    if fold_designs.is_none() {
                        fold_designs = Some(tuning::fold_stage_one_designs(folds, kernels, step_one.truncation)?);
                    }
                    let fd = fold_designs.as_ref().expect("fold designs just built");
                    let record = tuning::tune_refine(
                        folds,
                        fd,
                        &step_one.selected,
                        theta_scale(&full_designs),
                        &cfg.grid,
                    )?;
                    let r = fenet_refine(&full_designs, kernels, &centered.y, &step_one.selected, record.lambda)?;
                    (r, Some(record))
                };
                MethodResult {
                    method,
                    model: refine.model(&centered),
                    selected: refine.selected.clone(),
                    simple_set: None,
                    complex_set: None,
                    step_two: None,
                    kkt_max: refine.kkt_max,
                    refine: Some(refine),
                    tuning: record,
                }
            }
            Method::MofiFix | Method::MofiOptim => {
                let (s2, record) = if step_one.selected.is_empty() {
                    (StageTwoResult::empty(&step_one.config), None)
                } else {
                    let (lambda, alpha, record) = if method == Method::MofiFix {
                        let l = step_one.config.lambda1 + step_one.config.lambda2;
                        let a = if l > 0.0 { step_one.config.lambda1 / l } else { 1.0 };
                        (l, a, None)
                    } else {
                        let folds = folds.as_ref().expect("folds are built for optim");
                        let l = step_one.config.lambda1 + step_one.config.lambda2;
                        let a = if l > 0.0 { step_one.config.lambda1 / l } else { 1.0 };
                        let rec = tuning::tune_step_two(
                            folds,
                            kernels,
                            &step_one.selected,
                            step_one.truncation,
                            tuning::StepOnePoint {
                                lambda: l,
                                alpha: a,
                                theta: step_one.config.theta,
                            },
                            lambda_path.as_deref(),
                            &cfg.grid,
                            &step_two_base,
                        )?;
                        (rec.lambda, rec.alpha, Some(rec))
                    };
                    let solver = config_with(&step_two_base, lambda, alpha, step_one.config.theta);
                    let s2 = run_step2(&centered, kernels, &step_one.selected, step_one.truncation, &solver)?;
                    (s2, record)
                };
                MethodResult {
                    method,
                    model: s2.model(&centered),
                    selected: s2.selected.clone(),
                    simple_set: Some(s2.simple_set.clone()),
                    complex_set: Some(s2.complex_set.clone()),
                    kkt_max: s2.diagnostics.map(|d| d.kkt_max).unwrap_or(0.0),
                    step_two: Some(s2),
                    refine: None,
                    tuning: record,
                }
            }
        };
        results.push(res);
    }
    Ok(PipelineOutput {
        centered,
        step_one,
        step_one_tuning,
        methods: results,
    })
}

/// Two-stage fit with the given Step-Two strategy.
pub fn run_mofi(data: &Dataset, kernels: &KernelBank, strategy: Strategy, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    run_pipeline(data, kernels, cfg, &[strategy.method()])
}

/// Predictors that appear in either set, ascending.
pub fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().chain(b).copied().collect::<BTreeSet<_>>().into_iter().collect()
}
