mod common;

use common::{profiled_objective, proximal_gradient_oracle, random_problem, rng};
use mofi::pipeline::ridge_path;
use mofi::solver::{bcd_fit, kkt_residual, objective, PreparedProblem, SolverConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn tight(lambda1: f64, lambda2: f64, theta: f64, kappa: f64) -> SolverConfig {
    SolverConfig {
        lambda1,
        lambda2,
        theta,
        kappa,
        outer_tol: 1e-10,
        ..SolverConfig::default()
    }
}

#[test]
fn bcd_matches_proximal_gradient_on_small_instances() {
    let mut r = rng(2024);
    for case in 0..40 {
        let n = 10 + case % 16;
        let theta = 0.05 + 0.1 * (case % 3) as f64;
        let problem = random_problem(&mut r, n, 1 + case % 4, 3, theta, case % 2);
        let cfg = tight(0.05 + 0.05 * (case % 5) as f64, 0.02 * (case % 4) as f64, theta, 1.0);
        let fit = bcd_fit(&problem, &cfg).unwrap();
        let oracle = proximal_gradient_oracle(&problem, &cfg, 20_000);
        let ours = profiled_objective(&problem, &fit.coefficients.b, &cfg);
        let theirs = profiled_objective(&problem, &oracle, &cfg);
        assert!((ours - theirs).abs() <= 1e-6 * theirs.abs().max(1.0), "case {case}: {ours} vs {theirs}");
        assert!(kkt_residual(&problem, &fit.coefficients, &cfg).max <= 1e-6);
    }
}

#[test]
fn library_objective_matches_direct_formula() {
    let mut r = rng(5);
    let problem = random_problem(&mut r, 20, 3, 3, 0.1, 0);
    let cfg = tight(0.1, 0.05, 0.1, 1.0);
    let fit = bcd_fit(&problem, &cfg).unwrap();
    let lib = objective(&problem, &fit.coefficients, &cfg).unwrap();
    let direct = profiled_objective(&problem, &fit.coefficients.b, &cfg);
    assert!((lib - direct).abs() < 1e-12 * direct.max(1.0));
    assert!((fit.objective() - lib).abs() < 1e-12 * lib.max(1.0));
}

#[test]
fn large_penalty_returns_zero() {
    let mut r = rng(6);
    let problem = random_problem(&mut r, 15, 3, 2, 0.1, 1);
    let lmax = mofi::solver::lambda_max(&problem, 1.0).unwrap();
    let fit = bcd_fit(&problem, &tight(lmax * 1.0001, 0.0, 0.1, 1.0)).unwrap();
    assert_eq!(fit.coefficients.n_active(), 0);
    let fit = bcd_fit(&problem, &tight(lmax * 0.9, 0.0, 0.1, 1.0)).unwrap();
    assert!(fit.coefficients.n_active() > 0);
}

#[test]
fn ridge_path_matches_normal_equations() {
    let mut r = rng(11);
    let g = common::gaussian(&mut r, 30, 6);
    let y = DVector::from_fn(30, |i, _| (i as f64 * 0.37).sin());
    let lambdas = [1.0, 0.1, 1e-3];
    for (l, c) in lambdas.iter().zip(ridge_path(&g, &y, &lambdas).unwrap()) {
        let lhs = g.tr_mul(&g) / 30.0 + DMatrix::identity(6, 6) * *l;
        let direct = lhs.cholesky().unwrap().solve(&(g.tr_mul(&y) / 30.0));
        assert!((c - direct).amax() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sweeps_never_increase_the_objective(
        seed in 0u64..10_000,
        blocks in 1usize..5,
        lambda1 in 0.01f64..0.5,
        lambda2 in 0.0f64..0.2,
    ) {
        let mut r = rng(seed);
        let problem = random_problem(&mut r, 20, blocks, 3, 0.1, (seed % 2) as usize);
        let cfg = tight(lambda1, lambda2, 0.1, 1.0);
        let fit = bcd_fit(&problem, &cfg).unwrap();
        for w in fit.trace.windows(2) {
            prop_assert!(w[1].objective <= w[0].objective + 1e-10 * w[0].objective.abs().max(1.0));
        }
    }

    #[test]
    fn inactive_blocks_are_exact_zeros_below_the_threshold(
        seed in 0u64..10_000,
        blocks in 1usize..5,
        lambda1 in 0.01f64..0.5,
        kappa in 1.0f64..4.0,
    ) {
        let mut r = rng(seed);
        let problem = random_problem(&mut r, 20, blocks, 3, 0.1, 0);
        let cfg = tight(lambda1, 0.01, 0.1, kappa);
        let fit = bcd_fit(&problem, &cfg).unwrap();
        let kkt = kkt_residual(&problem, &fit.coefficients, &cfg);
        prop_assert!(kkt.max <= 1e-6, "kkt {}", kkt.max);
        for (j, active) in fit.coefficients.active.iter().enumerate() {
            let zero = fit.coefficients.b[j].iter().all(|&v| v == 0.0);
            prop_assert_eq!(!*active, zero);
        }
    }

    #[test]
    fn warm_and_cold_starts_agree(
        seed in 0u64..10_000,
        lambda1 in 0.02f64..0.4,
    ) {
        let mut r = rng(seed);
        let problem = random_problem(&mut r, 18, 3, 3, 0.2, 1);
        let prepared = PreparedProblem::new(&problem, 0.2).unwrap();
        let cold = prepared.fit(&tight(lambda1, 0.05, 0.2, 1.0), None).unwrap();
        let start = prepared.fit(&tight(lambda1 * 2.0, 0.05, 0.2, 1.0), None).unwrap();
        let warm = prepared.fit(&tight(lambda1, 0.05, 0.2, 1.0), Some(&start.coefficients)).unwrap();
        let (a, b) = (cold.objective(), warm.objective());
        prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
    }
}
