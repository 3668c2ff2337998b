//! Monte-Carlo benchmark: simulate, fit every method, score against the truth.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_table};
use crate::kernels::{KernelKind, KernelSpec};
use crate::metrics::{form_metrics, mean, quantile, rer, selection_metrics};
use crate::pipeline::{run_pipeline, Dataset, KernelBank, Method, PipelineConfig, PreparedKernel};
use crate::simgen::{simulate, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub simulation: SimConfig,
    pub pipeline: PipelineConfig,
    pub replicates: usize,
    /// Replicate ids start here, so runs can be split and merged.
    pub first_replicate: u64,
    pub methods: Vec<Method>,
    /// Overrides of `simulation.n` / `simulation.sigma`; each pair is one cell.
    pub sample_sizes: Vec<usize>,
    pub sigmas: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            simulation: SimConfig {
                n_test: 1000,
                ..SimConfig::default()
            },
            pipeline: PipelineConfig::default(),
            replicates: 10,
            first_replicate: 0,
            methods: Method::ALL.to_vec(),
            sample_sizes: Vec::new(),
            sigmas: Vec::new(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.pipeline.validate()?;
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.simulation.n_test < 2 {
            return Err(Error::Config("simulation.n_test must be at least 2 for the excess risk".into()));
        }
        Ok(())
    }

    /// Simulation settings for every `(n, σ)` cell.
    pub fn cells(&self) -> Vec<SimConfig> {
        let ns = if self.sample_sizes.is_empty() {
            vec![self.simulation.n]
        } else {
            self.sample_sizes.clone()
        };
        let sigmas = if self.sigmas.is_empty() {
            vec![self.simulation.sigma]
        } else {
            self.sigmas.clone()
        };
        ns.iter()
            .flat_map(|&n| {
                sigmas.iter().map(move |&sigma| SimConfig {
                    n,
                    sigma,
                    ..self.simulation.clone()
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub n: usize,
    pub sigma: f64,
    pub method: Method,
    pub replicate: u64,
    pub rer: f64,
    pub fpr: f64,
    pub fnr: f64,
    /// NaN for methods that do not label forms.
    pub r01: f64,
    pub r10: f64,
    pub kkt_max: f64,
    /// Failure message; metrics are NaN when set.
    pub error: Option<String>,
}

impl BenchRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

pub fn kernel_bank_for(cfg: &SimConfig) -> Result<KernelBank> {
    let spec = KernelSpec::new(
        KernelKind::Scenario {
            which: cfg.scenario,
        },
        cfg.grid_size,
    )?;
    Ok(KernelBank::shared(PreparedKernel::new(spec)?))
}

/// Simulates one replicate and scores every requested method. Fit failures
/// are reported in the rows rather than returned.
pub fn run_replicate(
    sim: &SimConfig,
    kernels: &KernelBank,
    pipeline: &PipelineConfig,
    methods: &[Method],
    replicate: u64,
) -> Result<Vec<BenchRow>> {
    let data = simulate(sim, replicate)?;
    let test_x = data
        .test_predictors()
        .ok_or_else(|| Error::invalid("benchmark needs a test sample"))?;
    let truth_terms: Vec<(usize, DVector<f64>)> = data
        .truth
        .signal_set()
        .into_iter()
        .map(|j| (j, data.truth.beta_curve(j, sim.grid_size)))
        .collect();
    let base = |method| BenchRow {
        scenario: sim.scenario.to_string(),
        n: sim.n,
        sigma: sim.sigma,
        method,
        replicate,
        rer: f64::NAN,
        fpr: f64::NAN,
        fnr: f64::NAN,
        r01: f64::NAN,
        r10: f64::NAN,
        kkt_max: f64::NAN,
        error: None,
    };
    let pipeline_cfg = PipelineConfig {
        grid: crate::tuning::TuningGrid {
            seed: pipeline.grid.seed.wrapping_add(replicate),
            ..pipeline.grid.clone()
        },
        ..pipeline.clone()
    };
    let dataset = Dataset::new(data.predictors.clone(), data.response.clone())?;
    let out = match run_pipeline(&dataset, kernels, &pipeline_cfg, methods) {
        Ok(out) => out,
        Err(e) => {
            log::warn!("replicate {replicate} (n = {}, sigma = {}) failed: {e}", sim.n, sim.sigma);
            return Ok(methods
                .iter()
                .map(|&m| BenchRow {
                    error: Some(e.to_string()),
                    ..base(m)
                })
                .collect());
        }
    };
    let signal = data.truth.signal_set();
    let (s0, s1) = (data.truth.simple_set(), data.truth.complex_set());
    out.methods
        .iter()
        .map(|res| {
            let (fpr, fnr) = selection_metrics(&res.selected, &signal, sim.p);
            let (r01, r10) = match (&res.simple_set, &res.complex_set) {
                (Some(a), Some(b)) => form_metrics(a, b, &s0, &s1),
                _ => (f64::NAN, f64::NAN),
            };
            Ok(BenchRow {
                rer: rer(&res.model.terms, &truth_terms, &test_x)?,
                fpr,
                fnr,
                r01,
                r10,
                kkt_max: res.kkt_max,
                ..base(res.method)
            })
        })
        .collect()
}

/// Every cell and replicate, replicates in parallel.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for sim in cfg.cells() {
        let kernels = kernel_bank_for(&sim)?;
        let reps: Vec<u64> = (0..cfg.replicates as u64).map(|r| cfg.first_replicate + r).collect();
        let cell = reps
            .par_iter()
            .map(|&r| {
                let t = std::time::Instant::now();
                let rows = run_replicate(&sim, &kernels, &cfg.pipeline, &cfg.methods, r);
                log::info!("n = {}, sigma = {}, replicate {r}: {:.1?}", sim.n, sim.sigma, t.elapsed());
                rows
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(cell.into_iter().flatten());
    }
    Ok(rows)
}

pub const RESULT_HEADER: [&str; 10] = ["scenario", "n", "sigma", "method", "replicate", "rer", "fpr", "fnr", "r01", "r10"];

pub fn write_results(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.scenario.clone(),
                r.n.to_string(),
                fmt_f64(r.sigma),
                r.method.to_string(),
                r.replicate.to_string(),
                fmt_f64(r.rer),
                fmt_f64(r.fpr),
                fmt_f64(r.fnr),
                fmt_f64(r.r01),
                fmt_f64(r.r10),
            ]
        })
        .collect();
    write_table(path, &RESULT_HEADER, &table)
}

/// Per-fit diagnostics and failure messages, keyed like the results table.
pub fn write_diagnostics(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.scenario.clone(),
                r.n.to_string(),
                fmt_f64(r.sigma),
                r.method.to_string(),
                r.replicate.to_string(),
                fmt_f64(r.kkt_max),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_table(
        path,
        &["scenario", "n", "sigma", "method", "replicate", "kkt_max", "error"],
        &table,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub n: usize,
    pub sigma: f64,
    pub method: Method,
    pub metric: &'static str,
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
    pub completed: usize,
    pub failed: usize,
}

/// Mean and 5%/95% quantiles of each metric over completed replicates.
pub fn summarize(rows: &[BenchRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize, u64, Method)> = Vec::new();
    for r in rows {
        let k = (r.scenario.clone(), r.n, r.sigma.to_bits(), r.method);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let metrics: [(&'static str, fn(&BenchRow) -> f64); 5] = [
        ("rer", |r| r.rer),
        ("fpr", |r| r.fpr),
        ("fnr", |r| r.fnr),
        ("r01", |r| r.r01),
        ("r10", |r| r.r10),
    ];
    let mut out = Vec::new();
    for (scenario, n, sigma, method) in keys {
        let group: Vec<&BenchRow> = rows
            .iter()
            .filter(|r| r.scenario == scenario && r.n == n && r.sigma.to_bits() == sigma && r.method == method)
            .collect();
        let failed = group.iter().filter(|r| r.failed()).count();
        for (name, get) in metrics {
            let vals: Vec<f64> = group.iter().filter(|r| !r.failed()).map(|r| get(r)).filter(|v| !v.is_nan()).collect();
            if !method.identifies_form() && matches!(name, "r01" | "r10") {
                continue;
            }
            out.push(SummaryRow {
                scenario: scenario.clone(),
                n,
                sigma: f64::from_bits(sigma),
                method,
                metric: name,
                mean: mean(&vals).unwrap_or(f64::NAN),
                q05: quantile(&vals, 0.05).unwrap_or(f64::NAN),
                q95: quantile(&vals, 0.95).unwrap_or(f64::NAN),
                completed: vals.len(),
                failed,
            });
        }
    }
    out
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let table: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.scenario.clone(),
                s.n.to_string(),
                fmt_f64(s.sigma),
                s.method.to_string(),
                s.metric.to_string(),
                fmt_f64(s.mean),
                fmt_f64(s.q05),
                fmt_f64(s.q95),
                s.completed.to_string(),
                s.failed.to_string(),
            ]
        })
        .collect();
    write_table(
        path,
        &["scenario", "n", "sigma", "method", "metric", "mean", "q05", "q95", "completed", "failed"],
        &table,
    )
}
