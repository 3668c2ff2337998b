//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! `MOFI_ACCEPTANCE_REPLICATES` overrides the number of benchmark replicates
//! (default 50).

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use mofi::bench::{kernel_bank_for, run_bench, summarize, BenchConfig, BenchRow, SummaryRow};
use mofi::kernels::{eval_builtin_kernel, grid, KernelKind, KernelPart, KernelSpec, Scenario};
use mofi::pipeline::*;
use mofi::simgen::{basis_matrix, simulate, verify_projection_identity, SimConfig};
use mofi::solver::{bcd_fit, kkt_residual, SolverConfig};
use mofi::tuning::{SelectionRule, TuningGrid};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const SCEN_I: KernelKind = KernelKind::Scenario { which: Scenario::I };

fn kernel_identities() -> Outcome {
    let mut r = common::rng(1);
    let mut series_err = 0.0f64;
    for _ in 0..20 {
        let (s, t): (f64, f64) = (r.random(), r.random());
        let series: f64 = (1..=2000)
            .map(|m| {
                let m = m as f64;
                2.0 * (m * PI * s).cos() * (m * PI * t).cos() / (PI.powi(4) * m.powi(4))
            })
            .sum();
        let closed = eval_builtin_kernel(&SCEN_I, KernelPart::Complement, s, t).unwrap();
        let null = eval_builtin_kernel(&SCEN_I, KernelPart::Null, s, t).unwrap();
        series_err = series_err.max((closed - series).abs()).max((null - PI.powi(-4)).abs());
    }
    let mut split_err = 0.0f64;
    for which in [Scenario::I, Scenario::II, Scenario::III] {
        let split = KernelSpec::new(KernelKind::Scenario { which }, 100).unwrap().split().unwrap();
        split_err = split_err.max(split.max_split_error());
    }
    // ∫ K₁ᴵ(s, t) ds by midpoint quadrature at every grid t.
    let n = 100;
    let constant_err = grid(n)
        .into_iter()
        .map(|t| {
            (1..=n)
                .map(|k| eval_builtin_kernel(&SCEN_I, KernelPart::Complement, (k as f64 - 0.5) / n as f64, t).unwrap())
                .sum::<f64>()
                .abs()
                / n as f64
        })
        .fold(0.0, f64::max);
    outcome(
        series_err <= 1e-8 && split_err <= 1e-12 && constant_err <= 1e-6,
        format!("series {series_err:.1e}, split {split_err:.1e}, constants {constant_err:.1e}"),
    )
}

fn solver_optimality() -> Outcome {
    let mut r = common::rng(2);
    let (mut worst_rel, mut worst_kkt) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let n = r.random_range(6..=25);
        let blocks = r.random_range(1..=4);
        let theta = r.random_range(0.01..0.5);
        let problem = common::random_problem(&mut r, n, blocks, 3, theta, case % 2);
        let cfg = SolverConfig {
            lambda1: r.random_range(0.01..0.5),
            lambda2: r.random_range(0.0..0.2),
            theta,
            outer_tol: 1e-10,
            ..SolverConfig::default()
        };
        let fit = match bcd_fit(&problem, &cfg) {
            Ok(f) => f,
            Err(e) => return outcome(false, format!("case {case}: {e}")),
        };
        let oracle = common::proximal_gradient_oracle(&problem, &cfg, 20_000);
        let ours = common::profiled_objective(&problem, &fit.coefficients.b, &cfg);
        let theirs = common::profiled_objective(&problem, &oracle, &cfg);
        worst_rel = worst_rel.max((ours - theirs) / theirs.abs().max(1e-12));
        worst_kkt = worst_kkt.max(kkt_residual(&problem, &fit.coefficients, &cfg).max);
    }
    outcome(
        worst_rel <= 1e-4 && worst_kkt <= 1e-6,
        format!("worst objective excess {worst_rel:.1e} (relative), worst KKT {worst_kkt:.1e}"),
    )
}

fn bench_config(replicates: usize) -> BenchConfig {
    BenchConfig {
        simulation: SimConfig {
            n: 250,
            p: 50,
            sigma: 1.0,
            scenario: Scenario::I,
            n_test: 1000,
            ..SimConfig::default()
        },
        pipeline: PipelineConfig {
            grid: TuningGrid {
                rule: SelectionRule::OneSe,
                theta_factors: vec![0.01],
                m_grid: Some(vec![50]),
                ..TuningGrid::default()
            },
            ..PipelineConfig::default()
        },
        replicates,
        ..BenchConfig::default()
    }
}

fn stat(summary: &[SummaryRow], m: Method, metric: &str) -> (f64, f64, f64, usize) {
    summary
        .iter()
        .find(|s| s.method == m && s.metric == metric)
        .map(|s| (s.mean, s.q05, s.q95, s.failed))
        .unwrap_or((f64::NAN, f64::NAN, f64::NAN, 0))
}

fn mean(summary: &[SummaryRow], m: Method, metric: &str) -> f64 {
    stat(summary, m, metric).0
}

fn kkt_certificate(rows: &[BenchRow]) -> Outcome {
    let converged: Vec<_> = rows.iter().filter(|r| !r.failed()).collect();
    let worst = converged.iter().map(|r| r.kkt_max).fold(0.0, f64::max);
    let failed = rows.len() - converged.len();
    outcome(
        !converged.is_empty() && worst <= 1e-6,
        format!("{} converged fits, {failed} failed, worst KKT {worst:.1e}", converged.len()),
    )
}

fn selection(summary: &[SummaryRow]) -> Outcome {
    // Every method but the refit inherits the Step-One support.
    let (fpr, _, _, failed) = stat(summary, Method::Fenet, "fpr");
    let fnr = mean(summary, Method::Fenet, "fnr");
    outcome(
        fpr <= 0.01 && fnr <= 0.01 && failed == 0,
        format!("FPR {fpr:.4}, FNR {fnr:.4}, {failed} failed replicates"),
    )
}

fn form_identification(summary: &[SummaryRow]) -> Outcome {
    let r = |m, k| mean(summary, m, k);
    let (f01, f10) = (r(Method::MofiFix, "r01"), r(Method::MofiFix, "r10"));
    let (o01, o10) = (r(Method::MofiOptim, "r01"), r(Method::MofiOptim, "r10"));
    outcome(
        f01 <= 0.03 && f10 <= 0.03 && o01 <= 0.10 && o10 <= 0.03,
        format!("MoFI-fix r01 {f01:.4} r10 {f10:.4}; MoFI-optim r01 {o01:.4} r10 {o10:.4}"),
    )
}

fn prediction(summary: &[SummaryRow]) -> Outcome {
    let (optim, q05, q95, _) = stat(summary, Method::MofiOptim, "rer");
    let fenet = mean(summary, Method::Fenet, "rer");
    outcome(
        (0.001..=0.010).contains(&optim) && optim < fenet,
        format!(
            "MoFI-optim RER {optim:.4} ({q05:.4}, {q95:.4}); fENet {fenet:.4}; fENet-refine {:.4}; MoFI-fix {:.4}",
            mean(summary, Method::FenetRefine, "rer"),
            mean(summary, Method::MofiFix, "rer")
        ),
    )
}

fn projection_identity() -> Outcome {
    match verify_projection_identity(2, 1, 2000, 200, 0.5, 7) {
        Ok(dev) => outcome(dev < 0.05, format!("max relative deviation {dev:.4}")),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn property_suites() -> Outcome {
    let mut failures = Vec::new();

    // Objective monotonicity across sweeps.
    let mut r = common::rng(3);
    for case in 0..50 {
        let problem = common::random_problem(&mut r, 20, 4, 3, 0.1, case % 2);
        let cfg = SolverConfig {
            lambda1: 0.05 + 0.01 * case as f64,
            lambda2: 0.01,
            theta: 0.1,
            ..SolverConfig::default()
        };
        let fit = bcd_fit(&problem, &cfg).unwrap();
        if fit.trace.windows(2).any(|w| w[1].objective > w[0].objective + 1e-10 * w[0].objective.max(1.0)) {
            failures.push(format!("objective increased in case {case}"));
        }
    }

    // Partition and prediction identity on simulated data.
    let sim_cfg = SimConfig {
        n: 60,
        p: 6,
        q: 4,
        n_basis: 12,
        grid_size: 30,
        ..SimConfig::default()
    };
    let kernels = kernel_bank_for(&sim_cfg).unwrap();
    let mut identity = 0.0f64;
    for rep in 0..5 {
        let sim = simulate(&sim_cfg, rep).unwrap();
        let data = Dataset::new(sim.predictors.clone(), sim.response.clone()).unwrap();
        let c = data.center();
        let designs = stage_one_designs(&c, &kernels, 10).unwrap();
        let theta = 0.01 * theta_scale(&designs);
        let cfg = SolverConfig {
            lambda1: 0.1,
            lambda2: 1e-6,
            theta,
            kappa: 3.0,
            ..SolverConfig::default()
        };
        let s1 = step_one_from_designs(&designs, &kernels, &c.y, &cfg, None).unwrap();
        let problem = block_problem(&designs, theta, &c.y, None).unwrap();
        let mut coef = DVector::zeros(c.n());
        for (blk, b) in problem.blocks.iter().zip(&s1.coefficients.b) {
            coef += &blk.gamma * b.zip_map(&blk.h_diag, |bi, h| bi / h.sqrt());
        }
        let grid_fit = s1.model(&c).predict(&data.predictors).unwrap().add_scalar(-c.y_mean);
        identity = identity.max((coef - grid_fit).amax());
        if s1.selected.is_empty() {
            continue;
        }
        let s2 = run_step2(&c, &kernels, &s1.selected, 10, &cfg).unwrap();
        let disjoint = s2.simple_set.iter().all(|j| !s2.complex_set.contains(j));
        if !disjoint || union(&s2.simple_set, &s2.complex_set) != s1.selected {
            failures.push(format!("simple/complex sets do not partition the selection in replicate {rep}"));
        }
    }
    if identity > 1e-8 {
        failures.push(format!("prediction identity off by {identity:.1e}"));
    }

    // Determinism under a fixed seed.
    let a = simulate(&sim_cfg, 4).unwrap();
    let b = simulate(&sim_cfg, 4).unwrap();
    if a.predictors != b.predictors || a.response != b.response {
        failures.push("simulation is not deterministic".into());
    }

    // Riemann error of the basis Gram matrix decays with the grid.
    let errors: Vec<f64> = [25, 50, 100, 200, 400]
        .iter()
        .map(|&n| {
            let phi = basis_matrix(8, n);
            (phi.tr_mul(&phi) / n as f64 - DMatrix::identity(8, 8)).amax()
        })
        .collect();
    if errors.windows(2).any(|w| w[1] >= w[0]) {
        failures.push(format!("basis Gram errors do not decay: {errors:?}"));
    }

    if failures.is_empty() {
        outcome(true, format!("identity {identity:.1e}, Gram errors {:.1e} -> {:.1e}", errors[0], errors[4]))
    } else {
        outcome(false, failures.join("; "))
    }
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!("criterion {id} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let replicates = std::env::var("MOFI_ACCEPTANCE_REPLICATES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(50);
    let mut all = true;
    let mut check = |id: usize, name: &str, o: Outcome| {
        report(id, name, &o);
        all &= o.pass;
        o.pass
    };

    check(1, "kernel identities", kernel_identities());
    check(2, "solver optimality", solver_optimality());

    let start = Instant::now();
    let rows = run_bench(&bench_config(replicates)).expect("benchmark runs");
    let summary = summarize(&rows);
    println!(
        "benchmark: Scenario I, n = 250, p = 50, sigma = 1, {replicates} replicates in {:.0} s",
        start.elapsed().as_secs_f64()
    );
    check(3, "KKT certificate", kkt_certificate(&rows));
    check(4, "selection", selection(&summary));
    check(5, "form identification", form_identification(&summary));
    check(6, "prediction", prediction(&summary));
    check(7, "projection identity", projection_identity());
    let props = check(8, "property suites", property_suites());
    check(
        9,
        "non-reproducible results covered by properties",
        outcome(props, "rate constants and EEG numbers are out of scope; criterion 8 stands in"),
    );

    if !all {
        std::process::exit(1);
    }
}
