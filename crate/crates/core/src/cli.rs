//! Command-line front end. One TOML file carries a section per command plus
//! global `seed`, `threads` and `out`; flags override the globals.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, summarize, write_diagnostics, write_results, write_summary, BenchConfig};
use crate::error::{Error, Result};
use crate::io::{
    ensure_dir, fmt_f64, read_matrix_csv, read_predictors, read_toml, read_vector_csv, write_matrix_csv,
    write_predictors, write_table, write_toml, write_vector_csv,
};
use crate::kernels::{KernelKind, KernelSpec, Scenario};
use crate::metrics::{form_metrics, prediction_metrics, rer, selection_metrics, PredictionMetrics};
use crate::pipeline::{
    default_solver, run_pipeline, Dataset, FitDiagnostics, FittedModel, FixedPenalty, KernelBank, Method, PipelineConfig,
    PipelineOutput, PreparedKernel, Strategy, DEFAULT_STEP_TWO_KAPPA,
};
use crate::simgen::{simulate, SimConfig, TruthManifest};
use crate::solver::{SolverConfig, SweepRecord};
use crate::tuning::{tune_step_one, FoldSet, TuningGrid, TuningRecord};

#[derive(Debug, Parser)]
#[command(name = "mofi", version, about = "Variable selection and model-form identification for functional linear regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for simulation streams and fold assignment.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Debug logging and sweep traces.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a simulated dataset bundle.
    Simulate,
    /// Fit a model to a dataset bundle.
    Fit,
    /// Cross-validate Step-One only and dump the CV surface.
    Cv,
    /// Replicated simulation study.
    Bench,
    /// Score a fitted result against a truth manifest or held-out data.
    Evaluate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub simulate: Option<SimConfig>,
    pub fit: Option<FitSection>,
    /// Tuning grid used by `fit` and `cv`.
    pub cv: Option<TuningGrid>,
    pub bench: Option<BenchConfig>,
    pub evaluate: Option<EvaluateSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// Directory holding `X_1.csv, X_2.csv, ...`.
    pub data: PathBuf,
    /// Response file; `<data>/y.csv` when absent.
    pub response: Option<PathBuf>,
    #[serde(default = "default_kernel")]
    pub kernel: KernelKind,
    #[serde(default = "default_solver")]
    pub solver: SolverConfig,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Skip cross-validation and use these penalties.
    pub fixed: Option<FixedPenalty>,
    #[serde(default = "default_step_two_kappa")]
    pub step_two_kappa: f64,
}

fn default_kernel() -> KernelKind {
    KernelKind::Scenario { which: Scenario::I }
}

fn default_step_two_kappa() -> f64 {
    DEFAULT_STEP_TWO_KAPPA
}

fn default_strategy() -> Strategy {
    Strategy::Optim
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Output directory of a `fit` run.
    pub result: PathBuf,
    pub truth: Option<PathBuf>,
    /// Held-out predictor directory; its `y.csv` is used when present.
    pub test: Option<PathBuf>,
}

/// Parses a config file; syntax and schema problems are configuration errors.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct ErrorRecord {
    kind: &'static str,
    exit_code: i32,
    message: String,
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let level = if cli.verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let mut out_dir = cli.out.clone();
    let result = (|| {
        let mut cfg = match &cli.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if cli.seed.is_some() {
            cfg.seed = cli.seed;
        }
        if cli.threads.is_some() {
            cfg.threads = cli.threads;
        }
        if cli.out.is_some() {
            cfg.out = cli.out.clone();
        }
        out_dir = cfg.out.clone();
        if let Some(t) = cfg.threads {
            if t == 0 {
                return Err(Error::Config("threads must be positive".into()));
            }
            // Fails only if a pool already exists, in which case it is reused.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        let out = cfg
            .out
            .clone()
            .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
        match cli.command {
            Command::Simulate => cmd_simulate(&cfg, &out),
            Command::Fit => cmd_fit(&cfg, &out, cli.verbose),
            Command::Cv => cmd_cv(&cfg, &out),
            Command::Bench => cmd_bench(&cfg, &out),
            Command::Evaluate => cmd_evaluate(&cfg, &out),
        }
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            let record = ErrorRecord {
                kind: e.kind(),
                exit_code: e.exit_code(),
                message: e.to_string(),
            };
            eprintln!("error[{}]: {}", record.kind, record.message);
            if let Some(dir) = out_dir {
                if let Err(w) = write_toml(&dir.join("error.toml"), &record) {
                    eprintln!("could not write error record: {w}");
                }
            }
            record.exit_code
        }
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref()
        .ok_or_else(|| Error::Config(format!("missing [{name}] section")))
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut sim = cfg.simulate.clone().unwrap_or_default();
    if let Some(seed) = cfg.seed {
        sim.seed = seed;
    }
    sim.validate().map_err(config_err)?;
    let data = simulate(&sim, 0)?;
    write_predictors(out, &data.predictors)?;
    write_vector_csv(&out.join("y.csv"), &data.response)?;
    write_toml(&out.join("truth.toml"), &data.manifest())?;
    if let (Some(test), Some(x)) = (&data.test, data.test_predictors()) {
        let dir = out.join("test");
        write_predictors(&dir, &x)?;
        write_vector_csv(&dir.join("y.csv"), &test.noiseless)?;
    }
    log::info!("wrote {} predictors of {} x {} to {}", sim.p, sim.n, sim.grid_size, out.display());
    Ok(())
}

fn load_fit_inputs(fit: &FitSection) -> Result<(Dataset, KernelBank)> {
    let predictors = read_predictors(&fit.data)?;
    let response_path = fit.response.clone().unwrap_or_else(|| fit.data.join("y.csv"));
    let response = read_vector_csv(&response_path)?;
    let data = Dataset::new(predictors, response)?;
    let spec = KernelSpec::new(fit.kernel.clone(), data.grid_size()).map_err(config_err)?;
    let kernels = KernelBank::shared(PreparedKernel::new(spec)?);
    Ok((data, kernels))
}

fn pipeline_config(cfg: &RunConfig, fit: &FitSection) -> Result<PipelineConfig> {
    let mut grid = cfg.cv.clone().unwrap_or_default();
    if let Some(seed) = cfg.seed {
        grid.seed = seed;
    }
    let pc = PipelineConfig {
        grid,
        solver: fit.solver,
        fixed: fit.fixed,
        step_two_kappa: fit.step_two_kappa,
    };
    pc.validate().map_err(config_err)?;
    Ok(pc)
}

/// Selected sets of a fit, 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedSets {
    pub method: Method,
    pub selected: Vec<usize>,
    pub simple: Vec<usize>,
    pub complex: Vec<usize>,
    pub step_one_selected: Vec<usize>,
}

/// What is needed to predict from a saved fit besides `curves.csv` and `x_means.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub y_mean: f64,
    pub p: usize,
    pub grid_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDiagnosticsRecord {
    pub step_one: FitDiagnostics,
    pub step_two: Option<FitDiagnostics>,
    pub kkt_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSummary {
    pub step_one_lambda1: f64,
    pub step_one_lambda2: f64,
    pub step_one_theta: f64,
    pub truncation: usize,
    pub step_two_lambda1: f64,
    pub step_two_lambda2: f64,
    pub step_one: Option<TuningRecord>,
    pub step_two: Option<TuningRecord>,
}

const ONE_BASED: fn(&[usize]) -> Vec<usize> = |v| v.iter().map(|j| j + 1).collect();

pub fn cmd_fit(cfg: &RunConfig, out: &Path, verbose: bool) -> Result<()> {
    let fit = section(&cfg.fit, "fit")?;
    let pc = pipeline_config(cfg, fit)?;
    let (data, kernels) = load_fit_inputs(fit)?;
    let method = fit.strategy.method();
    let res = run_pipeline(&data, &kernels, &pc, &[method])?;
    write_fit_bundle(out, &data, &res, method, verbose)
}

fn write_fit_bundle(out: &Path, data: &Dataset, res: &PipelineOutput, method: Method, verbose: bool) -> Result<()> {
    ensure_dir(out)?;
    let m = res.method(method).expect("requested method is present");
    let s2 = m.step_two.as_ref().expect("MoFI methods carry a Step-Two result");
    if m.selected.is_empty() {
        log::warn!("null model: no predictor selected");
    }
    write_toml(
        &out.join("sets.toml"),
        &SelectedSets {
            method,
            selected: ONE_BASED(&m.selected),
            simple: ONE_BASED(m.simple_set.as_deref().unwrap_or(&[])),
            complex: ONE_BASED(m.complex_set.as_deref().unwrap_or(&[])),
            step_one_selected: ONE_BASED(&res.step_one.selected),
        },
    )?;

    let mut rows = Vec::new();
    for (pos, &j) in s2.selected.iter().enumerate() {
        for g in 0..data.grid_size() {
            rows.push(vec![
                (j + 1).to_string(),
                (g + 1).to_string(),
                fmt_f64(s2.beta_hat[pos][g]),
                fmt_f64(s2.beta_null[pos][g]),
                fmt_f64(s2.beta_complex[pos][g]),
            ]);
        }
    }
    write_table(
        &out.join("curves.csv"),
        &["predictor", "grid_index", "beta_hat", "beta_null", "beta_complex"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = res
        .step_one
        .selected
        .iter()
        .flat_map(|&j| {
            let b = &res.step_one.beta_hat[j];
            (0..b.len()).map(move |g| vec![(j + 1).to_string(), (g + 1).to_string(), fmt_f64(b[g])])
        })
        .collect();
    write_table(&out.join("step_one_curves.csv"), &["predictor", "grid_index", "beta_hat"], &rows)?;

    write_toml(
        &out.join("model.toml"),
        &ModelHeader {
            y_mean: res.centered.y_mean,
            p: data.p(),
            grid_size: data.grid_size(),
        },
    )?;
    let means = DMatrix::from_fn(data.p(), data.grid_size(), |j, g| res.centered.x_means[j][g]);
    write_matrix_csv(&out.join("x_means.csv"), &means)?;

    let s1c = &res.step_one.config;
    write_toml(
        &out.join("tuning.toml"),
        &TuningSummary {
            step_one_lambda1: s1c.lambda1,
            step_one_lambda2: s1c.lambda2,
            step_one_theta: s1c.theta,
            truncation: res.step_one.truncation,
            step_two_lambda1: s2.config.lambda1,
            step_two_lambda2: s2.config.lambda2,
            step_one: res.step_one_tuning.clone(),
            step_two: m.tuning.clone(),
        },
    )?;
    if let Some(rec) = &res.step_one_tuning {
        write_cv_surface(&out.join("cv_surface.csv"), rec)?;
    }
    write_toml(
        &out.join("diagnostics.toml"),
        &FitDiagnosticsRecord {
            step_one: res.step_one.diagnostics,
            step_two: s2.diagnostics,
            kkt_max: res.step_one.diagnostics.kkt_max.max(m.kkt_max),
        },
    )?;
    if verbose {
        write_trace(&out.join("trace_step_one.csv"), &res.step_one.trace)?;
        write_trace(&out.join("trace_step_two.csv"), &s2.trace)?;
    }
    Ok(())
}

fn write_trace(path: &Path, trace: &[SweepRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| {
            vec![
                r.sweep.to_string(),
                fmt_f64(r.objective),
                r.active.to_string(),
                fmt_f64(r.max_change),
            ]
        })
        .collect();
    write_table(path, &["sweep", "objective", "active", "max_change"], &rows)
}

pub fn write_cv_surface(path: &Path, rec: &TuningRecord) -> Result<()> {
    let rows: Vec<Vec<String>> = rec
        .points
        .iter()
        .map(|p| {
            vec![
                fmt_f64(p.lambda),
                fmt_f64(p.alpha),
                fmt_f64(p.theta),
                p.m.to_string(),
                p.cv_error.map(fmt_f64).unwrap_or_default(),
                p.cv_se.map(fmt_f64).unwrap_or_default(),
                p.failed_folds.to_string(),
            ]
        })
        .collect();
    write_table(path, &["lambda", "alpha", "theta", "m", "cv_error", "cv_se", "failed_folds"], &rows)
}

pub fn cmd_cv(cfg: &RunConfig, out: &Path) -> Result<()> {
    let fit = section(&cfg.fit, "fit")?;
    let pc = pipeline_config(cfg, fit)?;
    let (data, kernels) = load_fit_inputs(fit)?;
    kernels.check(data.p(), data.grid_size())?;
    let centered = data.center();
    let folds = FoldSet::new(&data, pc.grid.folds, pc.grid.seed)?;
    let tuned = tune_step_one(&data, &centered, &folds, &kernels, &pc.grid, &pc.solver)?;
    write_toml(&out.join("tuning.toml"), &tuned.record)?;
    write_cv_surface(&out.join("cv_surface.csv"), &tuned.record)
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut bench = section(&cfg.bench, "bench")?.clone();
    if let Some(seed) = cfg.seed {
        bench.simulation.seed = seed;
        bench.pipeline.grid.seed = seed;
    }
    bench.validate().map_err(config_err)?;
    let rows = run_bench(&bench)?;
    write_results(&out.join("results.csv"), &rows)?;
    write_diagnostics(&out.join("fit_diagnostics.csv"), &rows)?;
    write_summary(&out.join("summary.csv"), &summarize(&rows))
}

/// Loads a saved fit as a predictor of the response.
pub fn load_model(dir: &Path) -> Result<(FittedModel, SelectedSets)> {
    let header: ModelHeader = read_toml(&dir.join("model.toml"))?;
    let sets: SelectedSets = read_toml(&dir.join("sets.toml"))?;
    let means = read_matrix_csv(&dir.join("x_means.csv"))?;
    if means.shape() != (header.p, header.grid_size) {
        return Err(Error::Parse {
            path: dir.join("x_means.csv"),
            message: format!("expected {} x {}", header.p, header.grid_size),
        });
    }
    let curves_path = dir.join("curves.csv");
    let mut reader = csv::Reader::from_path(&curves_path).map_err(|e| Error::Parse {
        path: curves_path.clone(),
        message: e.to_string(),
    })?;
    let mut terms: Vec<(usize, DVector<f64>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: curves_path.clone(),
            message: e.to_string(),
        })?;
        let parse_err = |what: &str| Error::Parse {
            path: curves_path.clone(),
            message: format!("bad {what} in row {:?}", rec.position().map(|p| p.line())),
        };
        let j: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("predictor"))?;
        let g: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("grid index"))?;
        let v: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("value"))?;
        if j == 0 || j > header.p || g == 0 || g > header.grid_size {
            return Err(parse_err("index"));
        }
        if terms.last().map(|t| t.0) != Some(j - 1) {
            terms.push((j - 1, DVector::zeros(header.grid_size)));
        }
        terms.last_mut().expect("just pushed").1[g - 1] = v;
    }
    let model = FittedModel {
        y_mean: header.y_mean,
        x_means: (0..header.p).map(|j| means.row(j).transpose()).collect(),
        terms,
    };
    Ok((model, sets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub r01: Option<f64>,
    pub r10: Option<f64>,
    pub rer: Option<f64>,
    pub prediction: Option<PredictionMetrics>,
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ev = section(&cfg.evaluate, "evaluate")?;
    let (model, sets) = load_model(&ev.result)?;
    let mut report = EvaluationReport {
        fpr: None,
        fnr: None,
        r01: None,
        r10: None,
        rer: None,
        prediction: None,
    };
    let truth = match &ev.truth {
        Some(p) => {
            let manifest: TruthManifest = read_toml(p)?;
            Some(manifest.truth()?)
        }
        None => None,
    };
    let zero_based = |v: &[usize]| v.iter().map(|j| j - 1).collect::<Vec<_>>();
    if let Some(t) = &truth {
        let (fpr, fnr) = selection_metrics(&zero_based(&sets.selected), &t.signal_set(), t.p);
        let (r01, r10) = form_metrics(
            &zero_based(&sets.simple),
            &zero_based(&sets.complex),
            &t.simple_set(),
            &t.complex_set(),
        );
        report.fpr = Some(fpr);
        report.fnr = Some(fnr);
        report.r01 = Some(r01);
        report.r10 = Some(r10);
    }
    if let Some(dir) = &ev.test {
        let x = read_predictors(dir)?;
        let yhat = model.predict(&x)?;
        ensure_dir(out)?;
        write_vector_csv(&out.join("predictions.csv"), &yhat)?;
        if let Some(t) = &truth {
            let grid = x[0].ncols();
            let truth_terms: Vec<_> = t.signal_set().into_iter().map(|j| (j, t.beta_curve(j, grid))).collect();
            report.rer = Some(rer(&model.terms, &truth_terms, &x)?);
        }
        let y_path = dir.join("y.csv");
        if y_path.exists() {
            let y = read_vector_csv(&y_path)?;
            report.prediction = Some(prediction_metrics(&y, &yhat, model.y_mean)?);
        }
    }
    write_toml(&out.join("evaluation.toml"), &report)
}
