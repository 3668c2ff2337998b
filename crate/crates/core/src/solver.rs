//! Block coordinate descent for the group elastic-net problem in transformed
//! eigen coordinates,
//!
//! ```text
//! (1/2n)‖Y − Z a − Σ_j Γ_j H_j^{-1/2} b_j‖² + λ₁ Σ_j ‖b_j‖ + (λ₂/2) Σ_j ‖H_j^{-1/2} b_j‖²
//! ```
//!
//! where each `(1/n) Γ_jᵀΓ_j = H_j − θI` is diagonal and the unpenalized
//! parametric block `Z a` is optional. Blocks are visited in ascending order;
//! a block whose score `ϱ_j = n⁻¹ H_j^{-1/2} Γ_jᵀ η_j` has norm at most `κλ₁`
//! is set exactly to zero, otherwise `b_j` solves
//! `Ω_j b − ϱ_j + λ₁ b/‖b‖ = 0` with `Ω_j = I + (λ₂ − θ) H_j^{-1}`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::guarded_cholesky;

/// Largest accepted condition number of `ZᵀZ`.
pub const PARAMETRIC_MAX_COND: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("inner block update did not converge after {iters} iterations (residual {residual:e})")]
    InnerNotConverged { iters: usize, residual: f64 },

    #[error("block coordinate descent did not converge in {sweeps} sweeps (last change {last_change:e})")]
    OuterNotConverged {
        sweeps: usize,
        last_change: f64,
        last: Box<BlockCoefficients>,
        objective_trace: Vec<f64>,
    },

    #[error("parametric design is singular or ill-conditioned (condition number {cond:.3e})")]
    SingularParametric { cond: f64 },

    #[error("Ω has a non-positive entry {value:e} in block {block}")]
    IllPosedOmega { block: usize, value: f64 },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: f64,
    pub kappa: f64,
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            theta: 1.0,
            kappa: 1.0,
            outer_tol: 1e-6,
            inner_tol: 1e-8,
            max_outer_iters: 500,
            max_inner_iters: 200,
        }
    }
}

impl SolverConfig {
    /// `λ₁ = αλ`, `λ₂ = (1 − α)λ` with the remaining fields at their defaults.
    pub fn from_penalty(lambda: f64, alpha: f64, theta: f64) -> Self {
        SolverConfig {
            lambda1: alpha * lambda,
            lambda2: (1.0 - alpha) * lambda,
            theta,
            ..SolverConfig::default()
        }
    }

    pub fn with_penalty(mut self, lambda: f64, alpha: f64) -> Self {
        self.lambda1 = alpha * lambda;
        self.lambda2 = (1.0 - alpha) * lambda;
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidProblem(msg));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad(format!("lambda1 must be nonnegative, got {}", self.lambda1));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("lambda2 must be nonnegative, got {}", self.lambda2));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad(format!("theta must be positive, got {}", self.theta));
        }
        if !(self.kappa >= 1.0) {
            return bad(format!("kappa must be at least 1, got {}", self.kappa));
        }
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return bad("iteration limits must be positive".into());
        }
        Ok(())
    }
}

/// One penalized block: `Γ_j` (n × M_j) and the diagonal of `H_j`.
#[derive(Debug, Clone)]
pub struct Block {
    pub gamma: DMatrix<f64>,
    pub h_diag: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockProblem {
    pub response: DVector<f64>,
    pub blocks: Vec<Block>,
    /// Unpenalized design `Z̃` (n × d).
    pub parametric_design: Option<DMatrix<f64>>,
}

impl BlockProblem {
    pub fn n(&self) -> usize {
        self.response.len()
    }

    fn validate(&self, theta: f64) -> Result<(), SolverError> {
        let n = self.n();
        if n == 0 {
            return Err(SolverError::InvalidProblem("empty response".into()));
        }
        for (j, blk) in self.blocks.iter().enumerate() {
            if blk.gamma.nrows() != n || blk.gamma.ncols() != blk.h_diag.len() {
                return Err(SolverError::InvalidProblem(format!(
                    "block {j}: Γ is {}x{}, H has {} entries, response has {n}",
                    blk.gamma.nrows(),
                    blk.gamma.ncols(),
                    blk.h_diag.len()
                )));
            }
            if blk.h_diag.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
                return Err(SolverError::InvalidProblem(format!("block {j}: H must be positive")));
            }
            check_block_gram(j, blk, theta)?;
        }
        if let Some(z) = &self.parametric_design {
            if z.nrows() != n {
                return Err(SolverError::InvalidProblem(format!(
                    "parametric design has {} rows, response has {n}",
                    z.nrows()
                )));
            }
            if z.ncols() > n {
                return Err(SolverError::InvalidProblem(format!(
                    "parametric design has {} columns but only {n} observations",
                    z.ncols()
                )));
            }
        }
        Ok(())
    }
}

/// The diagonal block update relies on `(1/n) ΓᵀΓ = H − θI`.
fn check_block_gram(j: usize, blk: &Block, theta: f64) -> Result<(), SolverError> {
    let n = blk.gamma.nrows() as f64;
    let g = blk.gamma.tr_mul(&blk.gamma) / n;
    let scale = blk.h_diag.max();
    let m = blk.h_diag.len();
    for c in 0..m {
        for r in 0..m {
            let target = if r == c { blk.h_diag[r] - theta } else { 0.0 };
            if (g[(r, c)] - target).abs() > 1e-6 * scale {
                return Err(SolverError::InvalidProblem(format!(
                    "block {j}: (1/n)ΓᵀΓ differs from H − θI at ({r}, {c})"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCoefficients {
    pub b: Vec<DVector<f64>>,
    pub a: Option<DVector<f64>>,
    pub active: Vec<bool>,
}

impl BlockCoefficients {
    pub fn zeros(problem: &BlockProblem) -> Self {
        BlockCoefficients {
            b: problem
                .blocks
                .iter()
                .map(|blk| DVector::zeros(blk.h_diag.len()))
                .collect(),
            a: problem
                .parametric_design
                .as_ref()
                .map(|z| DVector::zeros(z.ncols())),
            active: vec![false; problem.blocks.len()],
        }
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    fn refresh_active(&mut self) {
        for (flag, b) in self.active.iter_mut().zip(&self.b) {
            *flag = b.iter().any(|&v| v != 0.0);
        }
    }

    fn compatible_with(&self, problem: &BlockProblem) -> bool {
        self.b.len() == problem.blocks.len()
            && self
                .b
                .iter()
                .zip(&problem.blocks)
                .all(|(b, blk)| b.len() == blk.h_diag.len())
            && match (&self.a, &problem.parametric_design) {
                (None, None) => true,
                (Some(a), Some(z)) => a.len() == z.ncols(),
                _ => false,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    pub objective: f64,
    pub active: usize,
    pub max_change: f64,
}

#[derive(Debug, Clone)]
pub struct BcdFit {
    pub coefficients: BlockCoefficients,
    pub sweeps: usize,
    pub trace: Vec<SweepRecord>,
    /// `Y − Z a − Σ Γ H^{-1/2} b` at the returned coefficients.
    pub residual: DVector<f64>,
}

impl BcdFit {
    pub fn objective(&self) -> f64 {
        self.trace.last().map(|r| r.objective).unwrap_or(f64::NAN)
    }
}

/// Solves `Ω b − ϱ + λ₁ b/‖b‖ = 0`, or returns zero when `‖ϱ‖ ≤ κλ₁`.
///
/// Runs the fixed-point map `b ← (Ω + λ₁‖b‖⁻¹ I)⁻¹ ϱ` from `warm` (or from
/// `(1 − κλ₁/‖ϱ‖) Ω⁻¹ϱ` when the block starts at zero). Near the threshold
/// the map contracts slowly; if it stalls the root is finished off by
/// solving the equivalent scalar equation in `‖b‖`.
pub fn block_update(
    omega_diag: &DVector<f64>,
    rho: &DVector<f64>,
    lambda1: f64,
    kappa: f64,
    inner_tol: f64,
    max_inner_iters: usize,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>, SolverError> {
    let rho_norm = rho.norm();
    if rho_norm <= kappa * lambda1 {
        return Ok(DVector::zeros(rho.len()));
    }
    if lambda1 == 0.0 {
        return Ok(rho.component_div(omega_diag));
    }
    let tol = 1e-8 * (1.0 + rho_norm);

    let mut b = match warm {
        Some(w) if w.iter().any(|&v| v != 0.0) => w.clone(),
        _ => rho.component_div(omega_diag) * (1.0 - kappa * lambda1 / rho_norm),
    };
    if b.norm() == 0.0 {
        // κ = 1 with ‖ϱ‖ barely above λ₁ can underflow the hand-off.
        b = rho.component_div(omega_diag) * f64::EPSILON;
    }
    for _ in 0..max_inner_iters {
        let mu = lambda1 / b.norm();
        let next = DVector::from_fn(rho.len(), |i, _| rho[i] / (omega_diag[i] + mu));
        let change = (&next - &b).norm();
        let scale = next.norm();
        b = next;
        if change <= inner_tol * scale {
            break;
        }
    }
    if stationarity_residual(omega_diag, rho, lambda1, &b) <= tol {
        return Ok(b);
    }
    let b = secular_solve(omega_diag, rho, lambda1);
    let residual = stationarity_residual(omega_diag, rho, lambda1, &b);
    if residual <= tol {
        Ok(b)
    } else {
        Err(SolverError::InnerNotConverged {
            iters: max_inner_iters,
            residual,
        })
    }
}

fn stationarity_residual(omega: &DVector<f64>, rho: &DVector<f64>, lambda1: f64, b: &DVector<f64>) -> f64 {
    let nb = b.norm();
    if nb == 0.0 {
        return f64::INFINITY;
    }
    DVector::from_fn(rho.len(), |i, _| omega[i] * b[i] - rho[i] + lambda1 * b[i] / nb).norm()
}

/// Root `s = ‖b‖` of `Σ ϱ_m² / (ω_m s + λ₁)² = 1` by bracketed Newton steps;
/// then `b_m = s ϱ_m / (ω_m s + λ₁)`.
fn secular_solve(omega: &DVector<f64>, rho: &DVector<f64>, lambda1: f64) -> DVector<f64> {
    let g = |s: f64| -> (f64, f64) {
        let mut phi = 0.0;
        let mut dphi = 0.0;
        for (w, r) in omega.iter().zip(rho.iter()) {
            let d = w * s + lambda1;
            phi += r * r / (d * d);
            dphi -= 2.0 * r * r * w / (d * d * d);
        }
        let root = phi.sqrt();
        (root - 1.0, dphi / (2.0 * root))
    };
    let mut lo = 0.0;
    let mut hi = rho.norm() / omega.min();
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (val, der) = g(s);
        if val > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let newton = s - val / der;
        let next = if der < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - s).abs() <= 1e-15 * next.max(f64::MIN_POSITIVE) || hi - lo <= 1e-16 * hi {
            s = next;
            break;
        }
        s = next;
    }
    DVector::from_fn(rho.len(), |i, _| s * rho[i] / (omega[i] * s + lambda1))
}

/// Least-squares coefficients `(ZᵀZ)⁻¹ Zᵀ r`.
pub fn ols_parametric(z: &DMatrix<f64>, partial_residual: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
    if z.nrows() != partial_residual.len() || z.ncols() > z.nrows() {
        return Err(SolverError::InvalidProblem(format!(
            "parametric design {}x{} vs residual of length {}",
            z.nrows(),
            z.ncols(),
            partial_residual.len()
        )));
    }
    let chol = parametric_factor(z)?;
    Ok(chol.solve(&z.tr_mul(partial_residual)))
}

fn parametric_factor(z: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, SolverError> {
    guarded_cholesky(&z.tr_mul(z), PARAMETRIC_MAX_COND, "parametric Gram").map_err(|e| match e {
        crate::error::Error::IllConditioned { cond, .. } => SolverError::SingularParametric { cond },
        other => SolverError::InvalidProblem(other.to_string()),
    })
}

/// A problem with its blocks pre-scaled to `G_j = Γ_j H_j^{-1/2}`; reusable
/// across penalty levels that share θ.
pub struct PreparedProblem<'a> {
    problem: &'a BlockProblem,
    theta: f64,
    scaled: Vec<DMatrix<f64>>,
    parametric: Option<Cholesky<f64, Dyn>>,
}

impl<'a> PreparedProblem<'a> {
    pub fn new(problem: &'a BlockProblem, theta: f64) -> Result<Self, SolverError> {
        problem.validate(theta)?;
        let scaled = problem
            .blocks
            .iter()
            .map(|blk| {
                let mut g = blk.gamma.clone();
                for (mut col, h) in g.column_iter_mut().zip(blk.h_diag.iter()) {
                    col /= h.sqrt();
                }
                g
            })
            .collect();
        let parametric = match &problem.parametric_design {
            Some(z) if z.ncols() > 0 => Some(parametric_factor(z)?),
            _ => None,
        };
        Ok(PreparedProblem {
            problem,
            theta,
            scaled,
            parametric,
        })
    }

    pub fn problem(&self) -> &BlockProblem {
        self.problem
    }

    fn omegas(&self, config: &SolverConfig) -> Result<Vec<DVector<f64>>, SolverError> {
        self.problem
            .blocks
            .iter()
            .enumerate()
            .map(|(j, blk)| {
                let om = blk.h_diag.map(|h| 1.0 + (config.lambda2 - config.theta) / h);
                match om.iter().copied().find(|&v| !(v > 0.0)) {
                    Some(value) => Err(SolverError::IllPosedOmega { block: j, value }),
                    None => Ok(om),
                }
            })
            .collect()
    }

    /// `Y − Z a − Σ_j G_j b_j`.
    pub fn residual(&self, coeffs: &BlockCoefficients) -> DVector<f64> {
        let mut r = self.problem.response.clone();
        if let (Some(z), Some(a)) = (&self.problem.parametric_design, &coeffs.a) {
            r.gemv(-1.0, z, a, 1.0);
        }
        for (g, b) in self.scaled.iter().zip(&coeffs.b) {
            if b.iter().any(|&v| v != 0.0) {
                r.gemv(-1.0, g, b, 1.0);
            }
        }
        r
    }

    pub fn objective(&self, coeffs: &BlockCoefficients, config: &SolverConfig) -> f64 {
        let r = self.residual(coeffs);
        objective_from_residual(self.problem, &r, coeffs, config)
    }

    pub fn fit(
        &self,
        config: &SolverConfig,
        warm: Option<&BlockCoefficients>,
    ) -> Result<BcdFit, SolverError> {
        config.validate()?;
        if config.theta != self.theta {
            return Err(SolverError::InvalidProblem(format!(
                "problem prepared for theta {} but config has {}",
                self.theta, config.theta
            )));
        }
        let omegas = self.omegas(config)?;
        let n = self.problem.n() as f64;

        let mut coeffs = match warm {
            Some(w) if w.compatible_with(self.problem) => w.clone(),
            _ => BlockCoefficients::zeros(self.problem),
        };
        let mut r = self.residual(&coeffs);
        let mut trace = Vec::new();
        let mut rho = DVector::zeros(0);

        // Full sweeps alternate with sweeps over the current active set; a
        // fit is accepted only after a full sweep moves nothing.
        let mut full = true;
        for sweep in 1..=config.max_outer_iters {
            let mut max_change: f64 = 0.0;
            let mut membership_changed = false;

            if let (Some(chol), Some(z), Some(a)) =
                (&self.parametric, &self.problem.parametric_design, coeffs.a.as_mut())
            {
                // r ← r + Z a is the partial residual excluding the parametric part.
                r.gemv(1.0, z, a, 1.0);
                let a_new = chol.solve(&z.tr_mul(&r));
                r.gemv(-1.0, z, &a_new, 1.0);
                max_change = max_change.max((&a_new - &*a).norm());
                *a = a_new;
            }

            for (j, g) in self.scaled.iter().enumerate() {
                let was_active = coeffs.active[j];
                if !full && !was_active {
                    continue;
                }
                let b_old = &coeffs.b[j];
                if was_active {
                    r.gemv(1.0, g, b_old, 1.0);
                }
                if rho.len() != g.ncols() {
                    rho = DVector::zeros(g.ncols());
                }
                rho.gemv_tr(1.0 / n, g, &r, 0.0);
                let warm_b = if was_active { Some(b_old) } else { None };
                let b_new = block_update(
                    &omegas[j],
                    &rho,
                    config.lambda1,
                    config.kappa,
                    config.inner_tol,
                    config.max_inner_iters,
                    warm_b,
                )?;
                let now_active = b_new.iter().any(|&v| v != 0.0);
                if now_active {
                    r.gemv(-1.0, g, &b_new, 1.0);
                }
                membership_changed |= now_active != was_active;
                max_change = max_change.max((&b_new - b_old).norm());
                coeffs.b[j] = b_new;
                coeffs.active[j] = now_active;
            }

            let objective = objective_from_residual(self.problem, &r, &coeffs, config);
            trace.push(SweepRecord {
                sweep,
                objective,
                active: coeffs.n_active(),
                max_change,
            });
            let settled = max_change < config.outer_tol;
            if full && settled {
                coeffs.refresh_active();
                // Re-derive the residual to shed accumulated update drift.
                let residual = self.residual(&coeffs);
                return Ok(BcdFit {
                    coefficients: coeffs,
                    sweeps: sweep,
                    trace,
                    residual,
                });
            }
            if sweep == config.max_outer_iters {
                return Err(SolverError::OuterNotConverged {
                    sweeps: sweep,
                    last_change: max_change,
                    last: Box::new(coeffs),
                    objective_trace: trace.iter().map(|t| t.objective).collect(),
                });
            }
            full = if full { membership_changed } else { settled };
        }
        unreachable!("max_outer_iters is validated to be positive")
    }
}

fn objective_from_residual(
    problem: &BlockProblem,
    r: &DVector<f64>,
    coeffs: &BlockCoefficients,
    config: &SolverConfig,
) -> f64 {
    let n = problem.n() as f64;
    let mut obj = r.norm_squared() / (2.0 * n);
    for (blk, b) in problem.blocks.iter().zip(&coeffs.b) {
        obj += config.lambda1 * b.norm();
        let ridge: f64 = b.iter().zip(blk.h_diag.iter()).map(|(bi, h)| bi * bi / h).sum();
        obj += 0.5 * config.lambda2 * ridge;
    }
    obj
}

/// Fits from zero with a freshly prepared problem.
pub fn bcd_fit(problem: &BlockProblem, config: &SolverConfig) -> Result<BcdFit, SolverError> {
    PreparedProblem::new(problem, config.theta)?.fit(config, None)
}

/// Objective in transformed coordinates.
pub fn objective(problem: &BlockProblem, coeffs: &BlockCoefficients, config: &SolverConfig) -> Result<f64, SolverError> {
    Ok(PreparedProblem::new(problem, config.theta)?.objective(coeffs, config))
}

/// Optimality diagnostics at a candidate solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Stationarity norm for active blocks, dual slack violation for inactive.
    pub per_block: Vec<f64>,
    /// `‖n⁻¹ Zᵀ r‖` for the parametric block (zero when absent).
    pub parametric: f64,
    pub max: f64,
}

/// KKT residuals computed directly from the gradient of the smooth part,
/// `∇_j = −n⁻¹ H_j^{-1/2} Γ_jᵀ r + λ₂ H_j^{-1} b_j`: active blocks report
/// `‖∇_j + λ₁ b_j/‖b_j‖‖`, inactive blocks `max(0, ‖n⁻¹ H_j^{-1/2} Γ_jᵀ r‖ − κλ₁)`.
pub fn kkt_residual(problem: &BlockProblem, coeffs: &BlockCoefficients, config: &SolverConfig) -> KktReport {
    let n = problem.n() as f64;
    let mut r = problem.response.clone();
    if let (Some(z), Some(a)) = (&problem.parametric_design, &coeffs.a) {
        r -= z * a;
    }
    for (blk, b) in problem.blocks.iter().zip(&coeffs.b) {
        let c = b.zip_map(&blk.h_diag, |bi, h| bi / h.sqrt());
        r -= &blk.gamma * c;
    }
    let per_block: Vec<f64> = problem
        .blocks
        .iter()
        .zip(&coeffs.b)
        .map(|(blk, b)| {
            let score = (blk.gamma.tr_mul(&r) / n).zip_map(&blk.h_diag, |g, h| g / h.sqrt());
            let nb = b.norm();
            if nb == 0.0 {
                (score.norm() - config.kappa * config.lambda1).max(0.0)
            } else {
                DVector::from_fn(b.len(), |i, _| {
                    -score[i] + config.lambda2 * b[i] / blk.h_diag[i] + config.lambda1 * b[i] / nb
                })
                .norm()
            }
        })
        .collect();
    let parametric = problem
        .parametric_design
        .as_ref()
        .map(|z| (z.tr_mul(&r) / n).norm())
        .unwrap_or(0.0);
    let max = per_block.iter().copied().fold(parametric, f64::max);
    KktReport {
        per_block,
        parametric,
        max,
    }
}

/// Smallest λ with `α = 1` at which every block of a zero start is thresholded:
/// `max_j ‖n⁻¹ H_j^{-1/2} Γ_jᵀ Ỹ‖ / κ`, where `Ỹ` is the response after the
/// least-squares parametric fit (if any).
pub fn lambda_max(problem: &BlockProblem, kappa: f64) -> Result<f64, SolverError> {
    let n = problem.n() as f64;
    let y = match &problem.parametric_design {
        Some(z) if z.ncols() > 0 => {
            let a = ols_parametric(z, &problem.response)?;
            &problem.response - z * a
        }
        _ => problem.response.clone(),
    };
    Ok(problem
        .blocks
        .iter()
        .map(|blk| {
            (blk.gamma.tr_mul(&y) / n)
                .zip_map(&blk.h_diag, |g, h| g / h.sqrt())
                .norm()
        })
        .fold(0.0, f64::max)
        / kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn block_update_thresholds_to_zero() {
        let rho = DVector::from_vec(vec![0.4 * 0.6, 0.4 * 0.8]);
        let b = block_update(&DVector::from_element(2, 1.0), &rho, 0.5, 1.0, 1e-8, 200, None).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
        // Tie at the threshold resolves to zero.
        let rho = DVector::from_vec(vec![0.5]);
        let b = block_update(&DVector::from_element(1, 1.0), &rho, 0.5, 1.0, 1e-8, 200, None).unwrap();
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn block_update_scalar_closed_form() {
        let b = block_update(
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 2.0),
            0.5,
            1.0,
            1e-8,
            200,
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(b[0], 1.5, epsilon = 1e-12);
        let b = block_update(
            &DVector::from_element(1, 2.0),
            &DVector::from_element(1, -3.0),
            1.0,
            1.0,
            1e-8,
            200,
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(b[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn block_update_ridge_limit() {
        let omega = DVector::from_vec(vec![1.5, 2.0, 4.0]);
        let rho = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let b = block_update(&omega, &rho, 0.0, 1.0, 1e-8, 200, None).unwrap();
        assert_eq!(b, rho.component_div(&omega));
    }

    #[test]
    fn block_update_satisfies_stationarity() {
        let omega = DVector::from_vec(vec![1.0, 0.05, 3.0, 0.2]);
        let rho = DVector::from_vec(vec![0.3, -0.4, 0.2, 0.1]);
        for lambda1 in [0.01, 0.2, 0.5, 0.5477] {
            let b = block_update(&omega, &rho, lambda1, 1.0, 1e-8, 200, None).unwrap();
            assert!(b.norm() > 0.0);
            let res = stationarity_residual(&omega, &rho, lambda1, &b);
            assert!(res <= 1e-8 * (1.0 + rho.norm()), "λ₁={lambda1}: {res}");
        }
    }

    #[test]
    fn secular_and_fixed_point_agree() {
        let omega = DVector::from_vec(vec![1.0, 1.3, 2.0]);
        let rho = DVector::from_vec(vec![0.9, -0.4, 0.7]);
        let lambda1 = 0.3;
        let fp = block_update(&omega, &rho, lambda1, 1.0, 1e-14, 10_000, None).unwrap();
        let sec = secular_solve(&omega, &rho, lambda1);
        assert!((fp - sec).norm() <= 1e-10);
    }

    #[test]
    fn kappa_inflates_threshold() {
        let rho = DVector::from_vec(vec![0.6]);
        let omega = DVector::from_element(1, 1.0);
        assert!(block_update(&omega, &rho, 0.5, 1.0, 1e-8, 200, None).unwrap()[0] > 0.0);
        assert_eq!(block_update(&omega, &rho, 0.5, 1.5, 1e-8, 200, None).unwrap()[0], 0.0);
    }

    #[test]
    fn ols_examples() {
        // Orthonormal columns.
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let r = DVector::from_vec(vec![2.0, -1.0, 5.0]);
        assert_eq!(ols_parametric(&z, &r).unwrap().as_slice(), &[2.0, -1.0]);
        // Intercept regression returns the mean.
        let ones = DMatrix::from_element(4, 1, 1.0);
        let r = DVector::from_vec(vec![1.0, 2.0, 3.0, 6.0]);
        assert_abs_diff_eq!(ols_parametric(&ones, &r).unwrap()[0], 3.0, epsilon = 1e-14);
        // Rank deficiency.
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            ols_parametric(&z, &DVector::zeros(3)),
            Err(SolverError::SingularParametric { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            kappa: 0.5,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let cfg = SolverConfig::from_penalty(2.0, 0.25, 0.1);
        assert_abs_diff_eq!(cfg.lambda1, 0.5);
        assert_abs_diff_eq!(cfg.lambda2, 1.5);
    }
}
