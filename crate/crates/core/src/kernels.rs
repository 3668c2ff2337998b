//! Reproducing kernels on `[0, 1]`: closed-form Sobolev kernels, the Gaussian
//! kernel, anchored finite-dimensional null kernels, grid discretization,
//! null/complement splits and PSD square roots.
//!
//! All grid matrices use the points `{1/N, 2/N, …, 1}`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{guarded_cholesky, max_abs, sorted_symmetric_eigen, spectral_map};

/// Eigenvalues down to `-PSD_TOL * λ_max` are treated as round-off.
pub const PSD_TOL: f64 = 1e-8;
/// Square roots are refused below `-SQRT_REJECT_TOL * λ_max`.
pub const SQRT_REJECT_TOL: f64 = 1e-6;
/// Largest accepted condition number of a basis Gram matrix.
pub const GRAM_MAX_COND: f64 = 1e12;

/// Equally spaced grid `{1/N, …, 1}`.
pub fn grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

/// Fourth Bernoulli polynomial `t⁴ − 2t³ + t² − 1/30` on `[0, 1]`.
pub fn bernoulli_b4(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("B4 argument {t} outside [0, 1]")));
    }
    Ok(b4(t))
}

#[inline]
fn b4(t: f64) -> f64 {
    let t2 = t * t;
    t2 * t2 - 2.0 * t2 * t + t2 - 1.0 / 30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    I,
    II,
    III,
}

impl Scenario {
    pub fn null_dim(self) -> usize {
        match self {
            Scenario::I | Scenario::II => 1,
            Scenario::III => 2,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            "III" | "3" => Ok(Scenario::III),
            other => Err(Error::invalid(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Which piece of a split kernel to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelPart {
    Full,
    Null,
    Complement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelKind {
    /// `exp(-scale (s - t)²)`.
    GaussianRbf { scale: f64 },
    /// Sobolev kernel with the scenario's null space.
    Scenario { which: Scenario },
    /// Ambient kernel whose null space is spanned by `K(·, anchor)`.
    Anchored {
        ambient: Box<KernelKind>,
        anchors: Vec<f64>,
    },
}

impl KernelKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelKind::GaussianRbf { scale } => {
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::invalid(format!(
                        "Gaussian scale must be positive, got {scale}"
                    )));
                }
            }
            KernelKind::Scenario { .. } => {}
            KernelKind::Anchored { ambient, anchors } => {
                ambient.validate()?;
                if anchors.is_empty() {
                    return Err(Error::invalid("anchored kernel needs at least one anchor"));
                }
                if let Some(a) = anchors.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                    return Err(Error::invalid(format!("anchor {a} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Dimension of the null space, if the kernel defines one.
    pub fn null_dim(&self) -> Option<usize> {
        match self {
            KernelKind::GaussianRbf { .. } => None,
            KernelKind::Scenario { which } => Some(which.null_dim()),
            KernelKind::Anchored { anchors, .. } => Some(anchors.len()),
        }
    }

    fn full(&self, s: f64, t: f64) -> f64 {
        match self {
            KernelKind::GaussianRbf { scale } => (-scale * (s - t) * (s - t)).exp(),
            KernelKind::Scenario { .. } => sobolev_null_i() + sobolev_complement_i(s, t),
            KernelKind::Anchored { ambient, .. } => ambient.full(s, t),
        }
    }
}

#[inline]
fn sobolev_null_i() -> f64 {
    1.0 / PI.powi(4)
}

#[inline]
fn sobolev_complement_i(s: f64, t: f64) -> f64 {
    -(b4((s - t).abs() / 2.0) + b4((s + t) / 2.0)) / 3.0
}

#[inline]
fn sobolev_null_ii(s: f64, t: f64) -> f64 {
    2.0 * (PI * s).cos() * (PI * t).cos() / PI.powi(4)
}

/// Pointwise evaluation of `K`, `K₀` or `K₁` at `(s, t) ∈ [0, 1]²`.
pub fn eval_builtin_kernel(kind: &KernelKind, part: KernelPart, s: f64, t: f64) -> Result<f64> {
    kind.validate()?;
    for x in [s, t] {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::invalid(format!("kernel argument {x} outside [0, 1]")));
        }
    }
    let full = kind.full(s, t);
    let null = match kind {
        KernelKind::GaussianRbf { .. } => {
            if part == KernelPart::Full {
                return Ok(full);
            }
            return Err(Error::invalid(
                "a plain Gaussian kernel has no null space; use an anchored kernel",
            ));
        }
        KernelKind::Scenario { which } => match which {
            Scenario::I => sobolev_null_i(),
            Scenario::II => sobolev_null_ii(s, t),
            Scenario::III => sobolev_null_i() + sobolev_null_ii(s, t),
        },
        KernelKind::Anchored { ambient, anchors } => {
            let gram = DMatrix::from_fn(anchors.len(), anchors.len(), |a, b| {
                ambient.full(anchors[a], anchors[b])
            });
            let chol = guarded_cholesky(&gram, GRAM_MAX_COND, "anchor Gram matrix")?;
            let ps = DVector::from_iterator(anchors.len(), anchors.iter().map(|&a| ambient.full(s, a)));
            let pt = DVector::from_iterator(anchors.len(), anchors.iter().map(|&a| ambient.full(a, t)));
            ps.dot(&chol.solve(&pt))
        }
    };
    Ok(match part {
        KernelPart::Full => full,
        KernelPart::Null => null,
        KernelPart::Complement => full - null,
    })
}

/// Kernel choice plus the grid resolution it is discretized on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub grid_size: usize,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, grid_size: usize) -> Result<Self> {
        let spec = KernelSpec { kind, grid_size };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::invalid("grid size must be positive"));
        }
        self.kind.validate()
    }

    pub fn full_matrix(&self) -> Result<KernelMatrix> {
        self.validate()?;
        Ok(KernelMatrix::from_fn(self.grid_size, |s, t| self.kind.full(s, t)))
    }

    /// Grid matrices of `K`, `K₀` and `K₁`.
    pub fn split(&self) -> Result<KernelSplit> {
        self.validate()?;
        match &self.kind {
            KernelKind::GaussianRbf { .. } => Err(Error::invalid(
                "a plain Gaussian kernel has no null space; use an anchored kernel",
            )),
            KernelKind::Scenario { which } => {
                let full = self.full_matrix()?;
                let null = match which {
                    Scenario::I => KernelMatrix::from_fn(self.grid_size, |_, _| sobolev_null_i()),
                    Scenario::II => KernelMatrix::from_fn(self.grid_size, sobolev_null_ii),
                    Scenario::III => KernelMatrix::from_fn(self.grid_size, |s, t| {
                        sobolev_null_i() + sobolev_null_ii(s, t)
                    }),
                };
                KernelSplit::from_full_and_null(full, null, which.null_dim())
            }
            KernelKind::Anchored { ambient, anchors } => {
                let full = self.full_matrix()?;
                let pts = grid(self.grid_size);
                let basis = DMatrix::from_fn(self.grid_size, anchors.len(), |i, r| {
                    ambient.full(pts[i], anchors[r])
                });
                let gram = DMatrix::from_fn(anchors.len(), anchors.len(), |a, b| {
                    ambient.full(anchors[a], anchors[b])
                });
                null_kernel_from_basis(&full, &basis, &gram)
            }
        }
    }
}

/// Symmetric `N × N` grid evaluation of a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
}

impl KernelMatrix {
    /// Evaluates `f` on the upper triangle of the grid and mirrors it.
    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let pts = grid(n);
        let mut values = DMatrix::zeros(n, n);
        for c in 0..n {
            for r in 0..=c {
                let v = f(pts[r], pts[c]);
                values[(r, c)] = v;
                values[(c, r)] = v;
            }
        }
        KernelMatrix { values }
    }

    /// Wraps a square matrix that is symmetric up to round-off; the result is
    /// exactly symmetric.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                what: "kernel matrix columns",
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let scale = max_abs(&m).max(f64::MIN_POSITIVE);
        let asym = max_abs(&(&m - m.transpose()));
        if asym > 1e-10 * scale {
            return Err(Error::invalid(format!(
                "kernel matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let values = (&m + m.transpose()) * 0.5;
        Ok(KernelMatrix { values })
    }

    pub fn identity(n: usize) -> Self {
        KernelMatrix {
            values: DMatrix::identity(n, n),
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// Errors if some eigenvalue lies below `-PSD_TOL * λ_max`.
    pub fn check_psd(&self) -> Result<()> {
        let eig = sorted_symmetric_eigen(&self.values)?;
        let n = eig.values.len();
        if n == 0 {
            return Ok(());
        }
        let (max, min) = (eig.values[0], eig.values[n - 1]);
        if min < -PSD_TOL * max.max(0.0) {
            return Err(Error::NotPsd { min, max });
        }
        Ok(())
    }

    /// Writes the matrix as headerless CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_matrix_csv(path, &self.values)
    }
}

/// Grid matrices of a kernel and its null/complement decomposition.
#[derive(Debug, Clone)]
pub struct KernelSplit {
    pub full: KernelMatrix,
    pub null_part: KernelMatrix,
    pub complement: KernelMatrix,
    pub null_dim: usize,
}

impl KernelSplit {
    fn from_full_and_null(full: KernelMatrix, null: KernelMatrix, null_dim: usize) -> Result<Self> {
        let complement = KernelMatrix::from_matrix(full.values() - null.values())?;
        let split = KernelSplit {
            full,
            null_part: null,
            complement,
            null_dim,
        };
        split.check_rank()?;
        Ok(split)
    }

    fn check_rank(&self) -> Result<()> {
        if self.null_dim == 0 || self.null_dim > self.full.size() {
            return Err(Error::invalid(format!(
                "null dimension {} incompatible with grid size {}",
                self.null_dim,
                self.full.size()
            )));
        }
        let eig = sorted_symmetric_eigen(self.null_part.values())?;
        let top = eig.values[0];
        let rank = eig.values.iter().filter(|&&v| v > 1e-10 * top).count();
        if top <= 0.0 || rank < self.null_dim {
            return Err(Error::invalid(format!(
                "null kernel has numerical rank {rank} < {}",
                self.null_dim
            )));
        }
        Ok(())
    }

    /// `max |K − K₀ − K₁|` over the grid.
    pub fn max_split_error(&self) -> f64 {
        max_abs(&(self.full.values() - self.null_part.values() - self.complement.values()))
    }
}

/// Null kernel `ψ(s)ᵀ G⁻¹ ψ(t)` spanned by `basis_values` (one column per
/// basis function, evaluated on the ambient grid) with RKHS Gram matrix
/// `gram`; the complement is `ambient − K₀`.
pub fn null_kernel_from_basis(
    ambient: &KernelMatrix,
    basis_values: &DMatrix<f64>,
    gram: &DMatrix<f64>,
) -> Result<KernelSplit> {
    let n = ambient.size();
    let m0 = basis_values.ncols();
    if basis_values.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "basis values rows vs kernel grid",
            expected: n,
            got: basis_values.nrows(),
        });
    }
    if gram.nrows() != m0 || gram.ncols() != m0 {
        return Err(Error::DimensionMismatch {
            what: "Gram matrix size vs number of basis functions",
            expected: m0,
            got: gram.nrows(),
        });
    }
    let chol = guarded_cholesky(gram, GRAM_MAX_COND, "basis Gram matrix")?;
    let solved = chol.solve(&basis_values.transpose());
    let null = KernelMatrix::from_matrix(basis_values * solved)?;
    KernelSplit::from_full_and_null(ambient.clone(), null, m0)
}

/// Symmetric PSD square root; eigenvalues in `[-1e-6 λ_max, 0)` are clipped
/// to zero and anything more negative is rejected.
pub fn psd_sqrt(m: &KernelMatrix) -> Result<KernelMatrix> {
    let eig = sorted_symmetric_eigen(m.values())?;
    let n = eig.values.len();
    if n == 0 {
        return Ok(m.clone());
    }
    let (max, min) = (eig.values[0], eig.values[n - 1]);
    if min < -SQRT_REJECT_TOL * max.max(0.0) {
        return Err(Error::NotPsd { min, max });
    }
    // Eigenvalues at round-off level are treated as exact zeros.
    let floor = n as f64 * f64::EPSILON * max.max(0.0);
    Ok(KernelMatrix {
        values: spectral_map(&eig, |v| if v <= floor { 0.0 } else { v.sqrt() }),
    })
}
