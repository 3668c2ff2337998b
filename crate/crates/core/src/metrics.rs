//! Evaluation quantities: relative excess risk, selection and
//! form-identification error rates, prediction summaries, and quantiles.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `Σ_j N⁻¹ X_j β_j` over the listed predictors; other predictors contribute nothing.
pub fn riemann_functional(predictors: &[DMatrix<f64>], betas: &[(usize, DVector<f64>)]) -> Result<DVector<f64>> {
    let n = predictors.first().map(|x| x.nrows()).unwrap_or(0);
    let mut out = DVector::zeros(n);
    for (j, beta) in betas {
        let x = predictors
            .get(*j)
            .ok_or_else(|| Error::invalid(format!("predictor {j} out of range")))?;
        if x.ncols() != beta.len() {
            return Err(Error::DimensionMismatch {
                what: "coefficient curve length",
                expected: x.ncols(),
                got: beta.len(),
            });
        }
        out += x * beta / x.ncols() as f64;
    }
    Ok(out)
}

/// `mean((f̂ − f₀)²) / mean(f₀²)` over test observations, where `f` are the
/// linear functionals of the estimate and the truth.
pub fn rer_from_functionals(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            what: "test functional length",
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return Err(Error::invalid("true functional is identically zero on the test set"));
    }
    Ok((estimate - truth).norm_squared() / denom)
}

/// Relative excess risk with Riemann-sum inner products on the grid.
/// `beta_hat` and `beta_true` hold `(predictor, curve)` pairs.
pub fn rer(
    beta_hat: &[(usize, DVector<f64>)],
    beta_true: &[(usize, DVector<f64>)],
    test_predictors: &[DMatrix<f64>],
) -> Result<f64> {
    let est = riemann_functional(test_predictors, beta_hat)?;
    let tru = riemann_functional(test_predictors, beta_true)?;
    rer_from_functionals(&est, &tru)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(FPR, FNR)` with empty denominators mapped to zero.
pub fn selection_metrics(s_hat: &[usize], s_true: &[usize], p: usize) -> (f64, f64) {
    let est: BTreeSet<usize> = s_hat.iter().copied().collect();
    let tru: BTreeSet<usize> = s_true.iter().copied().collect();
    let false_pos = est.difference(&tru).count();
    let false_neg = tru.difference(&est).count();
    (ratio(false_pos, p - tru.len()), ratio(false_neg, tru.len()))
}

/// `(r(0→1), r(1→0))`: simple signals labelled complex, complex labelled simple.
pub fn form_metrics(s0_hat: &[usize], s1_hat: &[usize], s0_true: &[usize], s1_true: &[usize]) -> (f64, f64) {
    let s0h: BTreeSet<usize> = s0_hat.iter().copied().collect();
    let s1h: BTreeSet<usize> = s1_hat.iter().copied().collect();
    let r01 = s0_true.iter().filter(|j| s1h.contains(j)).count();
    let r10 = s1_true.iter().filter(|j| s0h.contains(j)).count();
    (ratio(r01, s0_true.len()), ratio(r10, s1_true.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub rmse: f64,
    pub relative_rmse: f64,
    pub pearson: f64,
}

/// RMSE, RMSE relative to predicting `null_baseline` everywhere, and the
/// Pearson correlation between truth and prediction.
pub fn prediction_metrics(y_true: &DVector<f64>, y_pred: &DVector<f64>, null_baseline: f64) -> Result<PredictionMetrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            what: "prediction length",
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    if y_true.len() < 2 {
        return Err(Error::invalid("need at least two observations"));
    }
    let n = y_true.len() as f64;
    let rmse = ((y_true - y_pred).norm_squared() / n).sqrt();
    let null_rmse = (y_true.map(|v| v - null_baseline).norm_squared() / n).sqrt();
    let relative_rmse = if null_rmse == 0.0 {
        if rmse == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        rmse / null_rmse
    };
    let ct = y_true.add_scalar(-y_true.mean());
    let cp = y_pred.add_scalar(-y_pred.mean());
    let denom = ct.norm() * cp.norm();
    if denom == 0.0 {
        return Err(Error::invalid("correlation undefined for a constant series"));
    }
    Ok(PredictionMetrics {
        rmse,
        relative_rmse,
        pearson: ct.dot(&cp) / denom,
    })
}

/// Quantile with linear interpolation between order statistics
/// (position `(n − 1)·prob`).
pub fn quantile(values: &[f64], prob: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&prob) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * prob;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy() -> (Vec<DMatrix<f64>>, Vec<(usize, DVector<f64>)>) {
        let x = vec![
            DMatrix::from_fn(6, 4, |i, t| ((i * 7 + t * 3) % 5) as f64 - 2.0),
            DMatrix::from_fn(6, 4, |i, t| ((i + 2 * t) % 3) as f64),
        ];
        let beta = vec![
            (0, DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0])),
            (1, DVector::from_vec(vec![0.3, 0.3, -1.0, 0.0])),
        ];
        (x, beta)
    }

    #[test]
    fn rer_examples() {
        let (x, beta) = toy();
        assert_eq!(rer(&beta, &beta, &x).unwrap(), 0.0);
        assert_abs_diff_eq!(rer(&[], &beta, &x).unwrap(), 1.0, epsilon = 1e-14);
        let doubled: Vec<_> = beta.iter().map(|(j, b)| (*j, b * 2.0)).collect();
        assert_abs_diff_eq!(rer(&doubled, &beta, &x).unwrap(), 1.0, epsilon = 1e-14);
        assert!(rer(&beta, &[], &x).is_err());
    }

    #[test]
    fn rer_is_shift_invariant() {
        let (x, beta) = toy();
        let est: Vec<_> = beta.iter().map(|(j, b)| (*j, b.map(|v| v * 0.9 + 0.1))).collect();
        let base = rer(&est, &beta, &x).unwrap();
        let shift = DVector::from_vec(vec![0.7, -0.2, 0.0, 1.1]);
        let est2: Vec<_> = est.iter().map(|(j, b)| (*j, b + &shift)).collect();
        let tru2: Vec<_> = beta.iter().map(|(j, b)| (*j, b + &shift)).collect();
        let num1 = (riemann_functional(&x, &est).unwrap() - riemann_functional(&x, &beta).unwrap()).norm_squared();
        let num2 = (riemann_functional(&x, &est2).unwrap() - riemann_functional(&x, &tru2).unwrap()).norm_squared();
        assert_abs_diff_eq!(num1, num2, epsilon = 1e-12);
        assert!(base > 0.0);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(selection_metrics(&[0, 1, 2], &[0, 1, 2], 5), (0.0, 0.0));
        let (fpr, fnr) = selection_metrics(&[0, 1, 3], &[0, 1, 2], 5);
        assert_abs_diff_eq!(fpr, 0.5);
        assert_abs_diff_eq!(fnr, 1.0 / 3.0);
        assert_eq!(selection_metrics(&[], &[1], 3), (0.0, 1.0));
        assert_eq!(selection_metrics(&[0, 1], &[0, 1], 2), (0.0, 0.0));
    }

    #[test]
    fn form_examples() {
        assert_eq!(form_metrics(&[0, 1], &[2, 3], &[0, 1], &[2, 3]), (0.0, 0.0));
        assert_eq!(form_metrics(&[0, 2], &[1, 3], &[0, 1], &[2, 3]), (0.5, 0.5));
        assert_eq!(form_metrics(&[], &[0, 1, 2, 3], &[0, 1], &[2, 3]), (1.0, 0.0));
        assert_eq!(form_metrics(&[], &[], &[], &[]), (0.0, 0.0));
    }

    #[test]
    fn prediction_examples() {
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.5]);
        let m = prediction_metrics(&y, &y, 0.0).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_abs_diff_eq!(m.pearson, 1.0, epsilon = 1e-14);
        let flat = DVector::from_element(4, y.mean());
        let m = prediction_metrics(&y, &flat, y.mean());
        assert!(m.is_err());
        let y2 = DVector::from_vec(vec![1.0, -1.0, 2.0, -2.0]);
        let m = prediction_metrics(&y2, &-y2.clone(), 0.0).unwrap();
        assert_abs_diff_eq!(m.pearson, -1.0, epsilon = 1e-14);
        let pred = DVector::from_vec(vec![0.9, -1.2, 2.1, -1.7]);
        let m = prediction_metrics(&y2, &pred, y2.mean()).unwrap();
        assert!(m.relative_rmse < 1.0);
    }

    #[test]
    fn relative_rmse_of_mean_predictor_is_one() {
        let y = DVector::from_vec(vec![1.0, 3.0, 2.0, 6.0]);
        let mu = y.mean();
        // A constant prediction has undefined correlation, so perturb it slightly.
        let pred = DVector::from_vec(vec![mu, mu, mu, mu + 1e-9]);
        let m = prediction_metrics(&y, &pred, mu).unwrap();
        assert_abs_diff_eq!(m.relative_rmse, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), Some(1.0));
        assert_eq!(quantile(&v, 1.0), Some(4.0));
        assert_abs_diff_eq!(quantile(&v, 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[7.0], 0.05), Some(7.0));
        assert_eq!(quantile(&[], 0.5), None);
    }
}
