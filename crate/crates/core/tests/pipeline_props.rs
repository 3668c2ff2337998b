use std::collections::BTreeSet;

use mofi::bench::kernel_bank_for;
use mofi::pipeline::*;
use mofi::simgen::{basis_matrix, simulate, SimConfig};
use mofi::solver::SolverConfig;
use mofi::tuning::TuningGrid;
use nalgebra::DVector;
use proptest::prelude::*;

fn small_sim(seed: u64) -> SimConfig {
    SimConfig {
        n: 60,
        p: 6,
        q: 4,
        n_basis: 12,
        grid_size: 30,
        seed,
        ..SimConfig::default()
    }
}

fn fixed(lambda1: f64, theta: f64, kappa: f64) -> SolverConfig {
    SolverConfig {
        lambda1,
        lambda2: 1e-6,
        theta,
        kappa,
        ..SolverConfig::default()
    }
}

/// `ȳ + Σ_j Γ_j H_j^{-1/2} b_j (+ Z̃ a)` from the solver's own coordinates.
fn coefficient_space_fit(problem: &mofi::solver::BlockProblem, coeffs: &mofi::solver::BlockCoefficients) -> DVector<f64> {
    let mut out = DVector::zeros(problem.n());
    if let (Some(z), Some(a)) = (&problem.parametric_design, &coeffs.a) {
        out += z * a;
    }
    for (blk, b) in problem.blocks.iter().zip(&coeffs.b) {
        out += &blk.gamma * b.zip_map(&blk.h_diag, |bi, h| bi / h.sqrt());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn step_two_partitions_the_selection_and_fits_match_on_the_grid(
        seed in 0u64..1000,
        lambda1 in 0.02f64..0.3,
        kappa in 1.0f64..5.0,
    ) {
        let cfg_sim = small_sim(seed);
        let sim = simulate(&cfg_sim, 0).unwrap();
        let kernels = kernel_bank_for(&cfg_sim).unwrap();
        let data = Dataset::new(sim.predictors.clone(), sim.response.clone()).unwrap();
        let c = data.center();
        let designs = stage_one_designs(&c, &kernels, 10).unwrap();
        let theta = 0.01 * theta_scale(&designs);
        let cfg = fixed(lambda1, theta, kappa);
        let s1 = step_one_from_designs(&designs, &kernels, &c.y, &cfg, None).unwrap();

        // Step-One prediction identity.
        let problem = block_problem(&designs, theta, &c.y, None).unwrap();
        let coef = coefficient_space_fit(&problem, &s1.coefficients);
        let model = s1.model(&c);
        let grid = model.predict(&data.predictors).unwrap().add_scalar(-c.y_mean);
        prop_assert!((coef - grid).amax() <= 1e-8);

        if s1.selected.is_empty() {
            return Ok(());
        }
        let s2 = run_step2(&c, &kernels, &s1.selected, 10, &cfg).unwrap();
        let simple: BTreeSet<_> = s2.simple_set.iter().copied().collect();
        let complex: BTreeSet<_> = s2.complex_set.iter().copied().collect();
        prop_assert!(simple.is_disjoint(&complex));
        prop_assert_eq!(union(&s2.simple_set, &s2.complex_set), s1.selected.clone());

        // Step-Two prediction identity.
        let design = stage_two_design(&c, &kernels, &s1.selected, 10).unwrap();
        let problem = step_two_problem(&design, &c.y, theta).unwrap();
        let coef = coefficient_space_fit(&problem, s2.coefficients.as_ref().unwrap());
        let grid = s2.model(&c).predict(&data.predictors).unwrap().add_scalar(-c.y_mean);
        prop_assert!((coef - grid).amax() <= 1e-8);
    }

    #[test]
    fn simulation_is_deterministic_under_a_fixed_seed(seed in 0u64..u64::MAX, rep in 0u64..50) {
        let cfg = SimConfig { n: 8, p: 3, q: 2, grid_size: 12, n_basis: 6, n_test: 4, seed, ..SimConfig::default() };
        let a = simulate(&cfg, rep).unwrap();
        let b = simulate(&cfg, rep).unwrap();
        prop_assert_eq!(&a.predictors, &b.predictors);
        prop_assert_eq!(&a.response, &b.response);
        prop_assert_eq!(a.manifest(), b.manifest());
        let other = simulate(&cfg, rep + 1).unwrap();
        prop_assert_ne!(&a.predictors, &other.predictors);
    }
}

#[test]
fn basis_orthonormality_error_decays_with_grid_size() {
    let errors: Vec<f64> = [25, 50, 100, 200, 400]
        .iter()
        .map(|&n| {
            let phi = basis_matrix(8, n);
            let gram = phi.tr_mul(&phi) / n as f64;
            (gram - nalgebra::DMatrix::identity(8, 8)).amax()
        })
        .collect();
    for w in errors.windows(2) {
        assert!(w[1] < w[0] * 0.6, "{errors:?}");
    }
    assert!(errors[4] < 0.01);
}

#[test]
fn pipeline_is_deterministic_and_partitions() {
    let cfg_sim = small_sim(3);
    let sim = simulate(&cfg_sim, 1).unwrap();
    let kernels = kernel_bank_for(&cfg_sim).unwrap();
    let data = Dataset::new(sim.predictors.clone(), sim.response.clone()).unwrap();
    let cfg = PipelineConfig {
        grid: TuningGrid {
            n_lambda: 6,
            theta_factors: vec![0.01],
            m_grid: Some(vec![8]),
            folds: 3,
            ..TuningGrid::default()
        },
        ..PipelineConfig::default()
    };
    let a = run_pipeline(&data, &kernels, &cfg, &Method::ALL).unwrap();
    let b = run_pipeline(&data, &kernels, &cfg, &Method::ALL).unwrap();
    for (x, y) in a.methods.iter().zip(&b.methods) {
        assert_eq!(x.selected, y.selected);
        assert_eq!(x.simple_set, y.simple_set);
        assert_eq!(x.complex_set, y.complex_set);
        assert_eq!(x.model.predict(&data.predictors).unwrap(), y.model.predict(&data.predictors).unwrap());
    }
    for m in [Method::MofiFix, Method::MofiOptim] {
        let r = a.method(m).unwrap();
        let s0 = r.simple_set.clone().unwrap();
        let s1 = r.complex_set.clone().unwrap();
        assert!(s0.iter().all(|j| !s1.contains(j)));
        assert_eq!(union(&s0, &s1), r.selected);
    }
}
