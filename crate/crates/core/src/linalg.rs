//! Dense symmetric linear-algebra helpers shared by the kernel, operator and
//! solver modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, eigenvalues sorted in descending order.
///
/// Each eigenvector is oriented so that its first entry with magnitude above
/// `1e-8 * max|v|` is positive.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> Result<SortedEigen> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            what: "symmetric eigendecomposition (columns)",
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(SortedEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    // Symmetrize to wash out round-off asymmetry from upstream products.
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        orient(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(SortedEigen { values, vectors })
}

fn orient(v: &mut DVector<f64>) {
    let scale = v.amax();
    if scale == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// `V diag(f(λ)) Vᵀ` for a sorted eigensystem.
pub fn spectral_map(eig: &SortedEigen, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = eig.vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(eig.values[j]);
    }
    let out = scaled * eig.vectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Cholesky factor of a symmetric positive definite matrix whose spectral
/// condition number does not exceed `max_cond`.
pub fn guarded_cholesky(
    m: &DMatrix<f64>,
    max_cond: f64,
    what: &'static str,
) -> Result<Cholesky<f64, Dyn>> {
    let eig = sorted_symmetric_eigen(m)?;
    let n = eig.values.len();
    if n == 0 {
        return Err(Error::invalid(format!("{what}: empty matrix")));
    }
    let max = eig.values[0];
    let min = eig.values[n - 1];
    if max <= 0.0 || min <= 0.0 || max / min > max_cond {
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::IllConditioned { what, cond });
    }
    let sym = (m + m.transpose()) * 0.5;
    Cholesky::new(sym).ok_or(Error::IllConditioned {
        what,
        cond: f64::INFINITY,
    })
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_is_sorted_and_oriented() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0]);
        let eig = sorted_symmetric_eigen(&m).unwrap();
        assert_eq!(eig.values.as_slice(), &[3.0, 2.0, 1.0]);
        assert_eq!(eig.vectors[(1, 0)], 1.0);
        assert_eq!(eig.vectors[(2, 1)], 1.0);
        assert_eq!(eig.vectors[(0, 2)], 1.0);
    }

    #[test]
    fn cholesky_guard_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            guarded_cholesky(&m, 1e12, "test"),
            Err(Error::IllConditioned { .. })
        ));
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(guarded_cholesky(&ok, 1e12, "test").is_ok());
    }
}
