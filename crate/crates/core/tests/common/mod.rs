#![allow(dead_code)]

use mofi::solver::{Block, BlockProblem, SolverConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random problem whose blocks satisfy `(1/n) ΓᵀΓ = H − θI`.
pub fn random_problem(
    rng: &mut ChaCha8Rng,
    n: usize,
    blocks: usize,
    max_m: usize,
    theta: f64,
    parametric: usize,
) -> BlockProblem {
    let blocks = (0..blocks)
        .map(|_| {
            let m = rng.random_range(1..=max_m);
            let q = gaussian(rng, n, m).qr().q();
            let eig: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..2.0)).collect();
            let gamma = DMatrix::from_fn(n, m, |i, k| q[(i, k)] * (n as f64 * eig[k]).sqrt());
            Block {
                gamma,
                h_diag: DVector::from_iterator(m, eig.iter().map(|e| e + theta)),
            }
        })
        .collect();
    let response = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
    BlockProblem {
        response,
        blocks,
        parametric_design: (parametric > 0).then(|| gaussian(rng, n, parametric)),
    }
}

/// Stacked `A = [Γ_j H_j^{-1/2}]` and block boundaries.
fn stacked(problem: &BlockProblem) -> (DMatrix<f64>, Vec<(usize, usize)>, DVector<f64>) {
    let n = problem.n();
    let total: usize = problem.blocks.iter().map(|b| b.h_diag.len()).sum();
    let mut a = DMatrix::zeros(n, total);
    let mut ranges = Vec::new();
    let mut inv_h = DVector::zeros(total);
    let mut start = 0;
    for blk in &problem.blocks {
        let m = blk.h_diag.len();
        for k in 0..m {
            let s = blk.h_diag[k].sqrt();
            a.column_mut(start + k).copy_from(&(blk.gamma.column(k) / s));
            inv_h[start + k] = 1.0 / blk.h_diag[k];
        }
        ranges.push((start, m));
        start += m;
    }
    (a, ranges, inv_h)
}

/// Objective evaluated from scratch at stacked coefficients `b` with the
/// parametric part profiled out by least squares.
pub fn profiled_objective(problem: &BlockProblem, b: &[DVector<f64>], cfg: &SolverConfig) -> f64 {
    let n = problem.n() as f64;
    let mut r = problem.response.clone();
    for (blk, bj) in problem.blocks.iter().zip(b) {
        for k in 0..bj.len() {
            r -= blk.gamma.column(k) * (bj[k] / blk.h_diag[k].sqrt());
        }
    }
    if let Some(z) = &problem.parametric_design {
        let coef = z.clone().svd(true, true).solve(&r, 1e-12).expect("least squares");
        r -= z * coef;
    }
    let mut obj = r.norm_squared() / (2.0 * n);
    for (blk, bj) in problem.blocks.iter().zip(b) {
        obj += cfg.lambda1 * bj.norm();
        obj += 0.5 * cfg.lambda2 * bj.iter().zip(blk.h_diag.iter()).map(|(v, h)| v * v / h).sum::<f64>();
    }
    obj
}

/// Accelerated projected (proximal) gradient on the group penalty, run for a
/// fixed number of iterations. Independent of the coordinate-descent code.
pub fn proximal_gradient_oracle(problem: &BlockProblem, cfg: &SolverConfig, iters: usize) -> Vec<DVector<f64>> {
    let n = problem.n() as f64;
    let (mut a, ranges, inv_h) = stacked(problem);
    let mut y = problem.response.clone();
    if let Some(z) = &problem.parametric_design {
        // Profile out the unpenalized part: work in the orthogonal complement of Z.
        let q = z.clone().qr().q();
        let proj = |v: &DVector<f64>| v - &q * (q.transpose() * v);
        y = proj(&y);
        for c in 0..a.ncols() {
            let col = proj(&a.column(c).into_owned());
            a.column_mut(c).copy_from(&col);
        }
    }
    let lip = (a.transpose() * &a).symmetric_eigenvalues().max() / n
        + cfg.lambda2 * inv_h.max();
    let step = 1.0 / lip;
    let dim = a.ncols();
    let mut x = DVector::zeros(dim);
    let mut v = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let resid = &y - &a * &v;
        let grad = -(a.transpose() * resid) / n + v.component_mul(&inv_h) * cfg.lambda2;
        let mut next = &v - grad * step;
        for &(s, m) in &ranges {
            let mut seg = next.rows_mut(s, m);
            let norm = seg.norm();
            let shrink = if norm > 0.0 { (1.0 - step * cfg.lambda1 / norm).max(0.0) } else { 0.0 };
            seg *= shrink;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        v = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        t = t_next;
    }
    ranges.iter().map(|&(s, m)| x.rows(s, m).into_owned()).collect()
}
