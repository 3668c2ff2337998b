//! K-fold cross-validation over `(λ, α, θ, M)` for Step-One, `(λ̄, ᾱ)` for
//! Step-Two and `λ₂` for the ridge refit, with `λ₁ = αλ`, `λ₂ = (1 − α)λ`.

use std::cmp::Ordering;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{default_truncation, null_scores, EigenDesign};
use crate::pipeline::{
    block_problem, project_scores, ridge_path, stack_gamma, stage_one_designs, stage_two_design, step_two_problem,
    theta_scale, CenteredData, Dataset, KernelBank, StageTwoDesign,
};
use crate::solver::{lambda_max, BlockCoefficients, PreparedProblem, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningGrid {
    /// Explicit λ values; otherwise a log grid below `λ_max`.
    pub lambda_grid: Option<Vec<f64>>,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub alpha_grid: Vec<f64>,
    /// Explicit θ values; otherwise `theta_factors` times `max_j Λ_{j1}/N`.
    pub theta_grid: Option<Vec<f64>>,
    pub theta_factors: Vec<f64>,
    pub m_grid: Option<Vec<usize>>,
    pub folds: usize,
    pub seed: u64,
    /// Step-Two `ᾱ` values are the `alpha_grid` entries within this many
    /// positions of the Step-One α.
    pub alpha_window: usize,
    pub rule: SelectionRule,
    /// Explicit ridge-refit λ₂ values; otherwise `refine_points` log-spaced
    /// values over `[1e-6, 1]` times `max_j Λ_{j1}/N`.
    pub refine_grid: Option<Vec<f64>>,
    pub refine_points: usize,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            lambda_grid: None,
            n_lambda: 20,
            lambda_min_ratio: 1e-3,
            alpha_grid: vec![1.0 - 1e-6, 1.0 - 1e-7, 1.0 - 1e-8],
            theta_grid: None,
            theta_factors: vec![0.01, 0.1, 1.0],
            m_grid: None,
            folds: 5,
            seed: 1,
            alpha_window: 2,
            rule: SelectionRule::Min,
            refine_grid: None,
            refine_points: 13,
        }
    }
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        if let Some(l) = &self.lambda_grid {
            if l.is_empty() || !l.iter().all(|&x| x >= 0.0 && x.is_finite()) {
                return bad("lambda_grid must be a nonempty list of nonnegative values".into());
            }
        } else if self.n_lambda == 0 || !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio <= 1.0) {
            return bad("n_lambda must be positive and lambda_min_ratio in (0, 1]".into());
        }
        if self.alpha_grid.is_empty() || !self.alpha_grid.iter().all(|&a| a > 0.0 && a <= 1.0) {
            return bad("alpha_grid must be a nonempty list in (0, 1]".into());
        }
        match &self.theta_grid {
            Some(t) if t.is_empty() || !positive(t) => return bad("theta_grid must be positive".into()),
            None if self.theta_factors.is_empty() || !positive(&self.theta_factors) => {
                return bad("theta_factors must be positive".into())
            }
            _ => {}
        }
        if let Some(m) = &self.m_grid {
            if m.is_empty() || m.contains(&0) {
                return bad("m_grid must list positive truncations".into());
            }
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        match &self.refine_grid {
            Some(r) if r.is_empty() || !positive(r) => return bad("refine_grid must be positive".into()),
            None if self.refine_points == 0 => return bad("refine_points must be positive".into()),
            _ => {}
        }
        Ok(())
    }
}

/// Partition of `0..n` into `k` folds of sizes differing by at most one
/// (larger folds first), assigned after a seeded shuffle.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot split {n} observations into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = idx[start..start + size].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += size;
    }
    Ok(out)
}

/// `n` log-spaced values from `max` down to `max · min_ratio`.
pub fn log_grid(max: f64, min_ratio: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![max];
    }
    let step = min_ratio.ln() / (n - 1) as f64;
    (0..n).map(|i| max * (step * i as f64).exp()).collect()
}

#[derive(Debug, Clone)]
pub struct Fold {
    pub train: CenteredData,
    /// Held-out predictors centered with the training means.
    pub test_predictors: Vec<DMatrix<f64>>,
    pub test_y: DVector<f64>,
}

impl Fold {
    fn null_mspe(&self) -> f64 {
        mspe(&self.test_y, &DVector::from_element(self.test_y.len(), self.train.y_mean))
    }
}

#[derive(Debug, Clone)]
pub struct FoldSet {
    pub seed: u64,
    pub assignments: Vec<Vec<usize>>,
    pub folds: Vec<Fold>,
}

impl FoldSet {
    pub fn new(data: &Dataset, k: usize, seed: u64) -> Result<Self> {
        let n = data.n();
        let assignments = split_folds(n, k, seed)?;
        let folds = assignments
            .iter()
            .map(|test_rows| {
                let mut in_test = vec![false; n];
                for &i in test_rows {
                    in_test[i] = true;
                }
                let train_rows: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
                if train_rows.len() < 2 {
                    return Err(Error::invalid("training fold has fewer than two observations"));
                }
                let train = data.subset(&train_rows).center();
                let test = data.subset(test_rows);
                let test_predictors = test
                    .predictors
                    .iter()
                    .enumerate()
                    .map(|(j, x)| train.center_new(j, x))
                    .collect();
                Ok(Fold {
                    train,
                    test_predictors,
                    test_y: test.response,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FoldSet {
            seed,
            assignments,
            folds,
        })
    }

    pub fn min_train_size(&self) -> usize {
        self.folds.iter().map(|f| f.train.n()).min().unwrap_or(0)
    }

    /// Mean over folds of the held-out error of predicting the training mean.
    pub fn null_cv_error(&self) -> f64 {
        self.folds.iter().map(Fold::null_mspe).sum::<f64>() / self.folds.len() as f64
    }
}

fn mspe(y: &DVector<f64>, yhat: &DVector<f64>) -> f64 {
    (y - yhat).norm_squared() / y.len() as f64
}

/// Step-One designs of a training fold and held-out scores in the same coordinates.
#[derive(Debug, Clone)]
pub struct FoldDesigns {
    pub train: Vec<Arc<EigenDesign>>,
    pub test_scores: Vec<DMatrix<f64>>,
}

pub fn fold_stage_one_designs(folds: &FoldSet, kernels: &KernelBank, truncation: usize) -> Result<Vec<FoldDesigns>> {
    folds
        .folds
        .iter()
        .map(|fold| {
            let train = stage_one_designs(&fold.train, kernels, truncation)?;
            let test_scores = fold
                .test_predictors
                .iter()
                .enumerate()
                .map(|(j, x)| project_scores(x, &kernels.get(j).full_sqrt, &train[j]))
                .collect::<Result<Vec<_>>>()?;
            Ok(FoldDesigns { train, test_scores })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
    Refine,
}

/// How a grid point is picked from the CV surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Smallest mean CV error.
    #[default]
    Min,
    /// Largest λ on the minimizer's path whose mean CV error is within one
    /// standard error of the minimum.
    OneSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub alpha: f64,
    pub theta: f64,
    pub m: usize,
    /// Mean held-out MSPE; absent when some fold failed to converge.
    pub cv_error: Option<f64>,
    /// Standard error of the fold errors.
    pub cv_se: Option<f64>,
    pub failed_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub stage: Stage,
    pub lambda: f64,
    pub alpha: f64,
    pub theta: f64,
    pub m: usize,
    pub cv_error: f64,
    pub null_cv_error: f64,
    pub folds: usize,
    pub fold_seed: u64,
    pub points: Vec<GridPoint>,
}

/// Index of the smallest CV error; ties go to larger λ, then larger α.
pub fn select_best(points: &[GridPoint]) -> Option<usize> {
    let key = |p: &GridPoint| p.cv_error.map(|e| (e, p.lambda, p.alpha, p.theta, p.m));
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        let Some(k) = key(p) else { continue };
        let better = match best.and_then(|b| key(&points[b])) {
            None => true,
            Some(bk) => match k.0.total_cmp(&bk.0) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => (k.1, k.2, k.3, std::cmp::Reverse(k.4)) > (bk.1, bk.2, bk.3, std::cmp::Reverse(bk.4)),
            },
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Applies `rule` on top of [`select_best`].
pub fn select_point(points: &[GridPoint], rule: SelectionRule) -> Option<usize> {
    let best = select_best(points)?;
    if rule == SelectionRule::Min {
        return Some(best);
    }
    let b = &points[best];
    let bound = b.cv_error? + b.cv_se.unwrap_or(0.0);
    let mut chosen = best;
    for (i, p) in points.iter().enumerate() {
        let same_path = p.alpha == b.alpha && p.theta == b.theta && p.m == b.m;
        if same_path && p.lambda > points[chosen].lambda && p.cv_error.is_some_and(|e| e <= bound) {
            chosen = i;
        }
    }
    Some(chosen)
}

fn record_from(stage: Stage, points: Vec<GridPoint>, folds: &FoldSet, rule: SelectionRule) -> Result<TuningRecord> {
    let best = select_point(&points, rule).ok_or(Error::NoConvergedGridPoint)?;
    let b = &points[best];
    Ok(TuningRecord {
        stage,
        lambda: b.lambda,
        alpha: b.alpha,
        theta: b.theta,
        m: b.m,
        cv_error: b.cv_error.expect("selected point has an error"),
        null_cv_error: folds.null_cv_error(),
        folds: folds.folds.len(),
        fold_seed: folds.seed,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FoldSummary {
    mean: Option<f64>,
    se: Option<f64>,
    failed: usize,
}

/// Mean and standard error of per-fold errors; any failed fold invalidates
/// the grid point.
fn aggregate(per_fold: &[Vec<Option<f64>>]) -> Vec<FoldSummary> {
    let n_points = per_fold.first().map(|v| v.len()).unwrap_or(0);
    let k = per_fold.len() as f64;
    (0..n_points)
        .map(|i| {
            let failed = per_fold.iter().filter(|f| f[i].is_none()).count();
            if failed > 0 {
                return FoldSummary {
                    mean: None,
                    se: None,
                    failed,
                };
            }
            let errs: Vec<f64> = per_fold.iter().map(|f| f[i].unwrap()).collect();
            let mean = errs.iter().sum::<f64>() / k;
            let se = if errs.len() > 1 {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                0.0
            };
            FoldSummary {
                mean: Some(mean),
                se: Some(se),
                failed: 0,
            }
        })
        .collect()
}

/// Fits a descending λ path with warm starts and records the held-out MSPE
/// at each point (`None` where the solver failed).
fn path_errors(
    prepared: &PreparedProblem<'_>,
    base: &SolverConfig,
    lambdas: &[f64],
    alpha: f64,
    predict: impl Fn(&BlockCoefficients) -> f64,
) -> Vec<Option<f64>> {
    // Paths run from large to small penalties; once a fit fails, the rest of
    // the path is left unfitted.
    let mut warm: Option<BlockCoefficients> = None;
    let mut broken = false;
    lambdas
        .iter()
        .map(|&lambda| {
            if broken {
                return None;
            }
            let cfg = base.with_penalty(lambda, alpha);
            match prepared.fit(&cfg, warm.as_ref()) {
                Ok(fit) => {
                    let err = predict(&fit.coefficients);
                    warm = Some(fit.coefficients);
                    Some(err)
                }
                Err(e) => {
                    log::debug!("CV fit failed at lambda {lambda:e}, alpha {alpha}: {e}");
                    broken = true;
                    None
                }
            }
        })
        .collect()
}

fn descending(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    v
}

/// Block-scores prediction `ȳ + Σ_j S_j H_j^{-1/2} b_j`.
fn predict_blocks(
    y_mean: f64,
    scores: &[&DMatrix<f64>],
    h: &[&DVector<f64>],
    coeffs: &BlockCoefficients,
    n_test: usize,
) -> DVector<f64> {
    let mut yhat = DVector::from_element(n_test, y_mean);
    for ((s, h), (b, active)) in scores.iter().zip(h).zip(coeffs.b.iter().zip(&coeffs.active)) {
        if *active {
            yhat += *s * b.zip_map(h, |bi, hi| bi / hi.sqrt());
        }
    }
    yhat
}

pub struct StepOneTuning {
    pub record: TuningRecord,
    /// λ path at the chosen `(θ, M)`, descending.
    pub lambda_path: Vec<f64>,
    pub full_designs: Vec<Arc<EigenDesign>>,
    pub fold_designs: Vec<FoldDesigns>,
}

/// Step-One grid search. λ paths are anchored at the full-data `λ_max` for
/// each `(θ, M)`.
pub fn tune_step_one(
    data: &Dataset,
    centered: &CenteredData,
    folds: &FoldSet,
    kernels: &KernelBank,
    grid: &TuningGrid,
    solver: &SolverConfig,
) -> Result<StepOneTuning> {
    grid.validate()?;
    let cap = folds.min_train_size().min(data.grid_size());
    let m_grid = match &grid.m_grid {
        Some(m) => m.clone(),
        None => vec![default_truncation(folds.min_train_size(), data.grid_size())],
    };
    if let Some(&bad) = m_grid.iter().find(|&&m| m > cap) {
        return Err(Error::Config(format!(
            "truncation {bad} exceeds min(training size, grid size) = {cap}"
        )));
    }

    struct MState {
        m: usize,
        full: Vec<Arc<EigenDesign>>,
        folds: Vec<FoldDesigns>,
        thetas: Vec<f64>,
        paths: Vec<Vec<f64>>,
    }

    let mut states = Vec::new();
    for &m in &m_grid {
        let full = stage_one_designs(centered, kernels, m)?;
        let scale = theta_scale(&full);
        let thetas = match &grid.theta_grid {
            Some(t) => t.clone(),
            None => grid.theta_factors.iter().map(|f| f * scale).collect(),
        };
        if thetas.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::invalid("θ grid is not positive; are the predictors constant?"));
        }
        let paths = thetas
            .iter()
            .map(|&theta| {
                Ok(match &grid.lambda_grid {
                    Some(l) => descending(l.clone()),
                    None => {
                        let problem = block_problem(&full, theta, &centered.y, None)?;
                        let lmax = lambda_max(&problem, solver.kappa)?;
                        let lmax = if lmax > 0.0 { lmax } else { 1.0 };
                        log_grid(lmax, grid.lambda_min_ratio, grid.n_lambda)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fd = fold_stage_one_designs(folds, kernels, m)?;
        states.push(MState {
            m,
            full,
            folds: fd,
            thetas,
            paths,
        });
    }

    // One job per (M, θ, α, fold); each walks its λ path.
    let mut jobs = Vec::new();
    for (mi, st) in states.iter().enumerate() {
        for ti in 0..st.thetas.len() {
            for ai in 0..grid.alpha_grid.len() {
                for fi in 0..folds.folds.len() {
                    jobs.push((mi, ti, ai, fi));
                }
            }
        }
    }
    let results: Vec<Result<Vec<Option<f64>>>> = jobs
        .par_iter()
        .map(|&(mi, ti, ai, fi)| {
            let st = &states[mi];
            let fold = &folds.folds[fi];
            let fd = &st.folds[fi];
            let theta = st.thetas[ti];
            let problem = block_problem(&fd.train, theta, &fold.train.y, None)?;
            let prepared = PreparedProblem::new(&problem, theta)?;
            let base = SolverConfig { theta, ..*solver };
            let scores: Vec<&DMatrix<f64>> = fd.test_scores.iter().collect();
            let h: Vec<&DVector<f64>> = problem.blocks.iter().map(|b| &b.h_diag).collect();
            Ok(path_errors(&prepared, &base, &st.paths[ti], grid.alpha_grid[ai], |c| {
                let yhat = predict_blocks(fold.train.y_mean, &scores, &h, c, fold.test_y.len());
                mspe(&fold.test_y, &yhat)
            }))
        })
        .collect();

    let mut points = Vec::new();
    let mut it = results.into_iter();
    for st in &states {
        for (ti, &theta) in st.thetas.iter().enumerate() {
            for &alpha in &grid.alpha_grid {
                let per_fold = (0..folds.folds.len())
                    .map(|_| it.next().expect("one result per job"))
                    .collect::<Result<Vec<_>>>()?;
                for (agg, &lambda) in aggregate(&per_fold).into_iter().zip(&st.paths[ti]) {
                    points.push(GridPoint {
                        lambda,
                        alpha,
                        theta,
                        m: st.m,
                        cv_error: agg.mean,
                        cv_se: agg.se,
                        failed_folds: agg.failed,
                    });
                }
            }
        }
    }
    let record = record_from(Stage::One, points, folds, grid.rule)?;
    let st = states
        .into_iter()
        .find(|s| s.m == record.m)
        .expect("chosen M comes from the grid");
    let ti = st
        .thetas
        .iter()
        .position(|&t| t == record.theta)
        .expect("chosen θ comes from the grid");
    Ok(StepOneTuning {
        lambda_path: st.paths[ti].clone(),
        full_designs: st.full,
        fold_designs: st.folds,
        record,
    })
}

/// Chosen Step-One penalties, the anchor for the Step-Two search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOnePoint {
    pub lambda: f64,
    pub alpha: f64,
    pub theta: f64,
}

/// Grid entries within `window` positions of the entry nearest to `alpha`;
/// `alpha` itself is kept when it is not a grid value.
pub fn alpha_window(alpha: f64, grid: &[f64], window: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let Some(centre) = (0..sorted.len()).min_by(|&a, &b| (sorted[a] - alpha).abs().total_cmp(&(sorted[b] - alpha).abs()))
    else {
        return vec![alpha];
    };
    let lo = centre.saturating_sub(window);
    let hi = (centre + window).min(sorted.len() - 1);
    let mut out = sorted[lo..=hi].to_vec();
    if !out.contains(&alpha) {
        out.push(alpha);
        out.sort_by(f64::total_cmp);
    }
    out
}

/// `λ̄` candidates: path values not above the Step-One λ, or a log grid
/// below it when no path is available.
pub fn step_two_lambdas(lambda: f64, path: Option<&[f64]>, grid: &TuningGrid) -> Vec<f64> {
    let from_path = path.map(|p| {
        p.iter()
            .copied()
            .filter(|&l| l <= lambda * (1.0 + 1e-12))
            .collect::<Vec<_>>()
    });
    match from_path {
        Some(v) if !v.is_empty() => descending(v),
        _ => log_grid(lambda, grid.lambda_min_ratio, grid.n_lambda.max(1)),
    }
}

struct StepTwoFold {
    design: StageTwoDesign,
    z_test: DMatrix<f64>,
    complement_test: Vec<DMatrix<f64>>,
}

/// Step-Two search over `(λ̄, ᾱ)` with `Ŝ` and θ held at their Step-One values.
#[allow(clippy::too_many_arguments)]
pub fn tune_step_two(
    folds: &FoldSet,
    kernels: &KernelBank,
    selected: &[usize],
    truncation: usize,
    step_one: StepOnePoint,
    lambda_path: Option<&[f64]>,
    grid: &TuningGrid,
    solver: &SolverConfig,
) -> Result<TuningRecord> {
    grid.validate()?;
    let lambdas = step_two_lambdas(step_one.lambda, lambda_path, grid);
    let alphas = alpha_window(step_one.alpha, &grid.alpha_grid, grid.alpha_window);
    let theta = step_one.theta;

    let fold_data = folds
        .folds
        .iter()
        .map(|fold| {
            let design = stage_two_design(&fold.train, kernels, selected, truncation)?;
            let n_test = fold.test_y.len();
            let mut z_test = DMatrix::zeros(n_test, design.z.ncols());
            let mut col = 0;
            let mut complement_test = Vec::with_capacity(selected.len());
            for (pos, &j) in selected.iter().enumerate() {
                let kernel = kernels.get(j);
                let phi = kernel.null_basis.as_ref().expect("design build checked the split");
                let k1 = kernel.complement_sqrt.as_ref().expect("design build checked the split");
                let zj = null_scores(&fold.test_predictors[j], phi)?;
                z_test.columns_mut(col, zj.ncols()).copy_from(&zj);
                col += zj.ncols();
                complement_test.push(project_scores(&fold.test_predictors[j], k1, &design.complement[pos])?);
            }
            Ok(StepTwoFold {
                design,
                z_test,
                complement_test,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|ai| (0..folds.folds.len()).map(move |fi| (ai, fi)))
        .collect();
    let results: Vec<Result<Vec<Option<f64>>>> = jobs
        .par_iter()
        .map(|&(ai, fi)| {
            let fold = &folds.folds[fi];
            let fdat = &fold_data[fi];
            let problem = step_two_problem(&fdat.design, &fold.train.y, theta)?;
            let prepared = PreparedProblem::new(&problem, theta)?;
            let base = SolverConfig { theta, ..*solver };
            let scores: Vec<&DMatrix<f64>> = fdat.complement_test.iter().collect();
            let h: Vec<&DVector<f64>> = problem.blocks.iter().map(|b| &b.h_diag).collect();
            Ok(path_errors(&prepared, &base, &lambdas, alphas[ai], |c| {
                let mut yhat = predict_blocks(fold.train.y_mean, &scores, &h, c, fold.test_y.len());
                if let Some(a) = &c.a {
                    yhat += &fdat.z_test * a;
                }
                mspe(&fold.test_y, &yhat)
            }))
        })
        .collect();

    let mut points = Vec::new();
    let mut it = results.into_iter();
    for &alpha in &alphas {
        let per_fold = (0..folds.folds.len())
            .map(|_| it.next().expect("one result per job"))
            .collect::<Result<Vec<_>>>()?;
        for (agg, &lambda) in aggregate(&per_fold).into_iter().zip(&lambdas) {
            points.push(GridPoint {
                lambda,
                alpha,
                theta,
                m: truncation,
                cv_error: agg.mean,
                cv_se: agg.se,
                failed_folds: agg.failed,
            });
        }
    }
    record_from(Stage::Two, points, folds, grid.rule)
}

/// λ₂ search for the ridge refit on `Ŝ`; recorded with `α = 0`.
pub fn tune_refine(
    folds: &FoldSet,
    fold_designs: &[FoldDesigns],
    selected: &[usize],
    scale: f64,
    grid: &TuningGrid,
) -> Result<TuningRecord> {
    grid.validate()?;
    if selected.is_empty() {
        return Err(Error::invalid("ridge refit needs a nonempty selection"));
    }
    let lambdas = match &grid.refine_grid {
        Some(r) => descending(r.clone()),
        None => log_grid(scale.max(f64::MIN_POSITIVE), 1e-6, grid.refine_points),
    };
    let m = fold_designs[0].train[selected[0]].truncation();
    let per_fold = folds
        .folds
        .par_iter()
        .zip(fold_designs.par_iter())
        .map(|(fold, fd)| {
            let gamma = stack_gamma(&fd.train, selected);
            let path = ridge_path(&gamma, &fold.train.y, &lambdas)?;
            let test = stack_test(&fd.test_scores, selected);
            Ok(path
                .iter()
                .map(|c| {
                    let yhat = (&test * c).add_scalar(fold.train.y_mean);
                    Some(mspe(&fold.test_y, &yhat))
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let points = aggregate(&per_fold)
        .into_iter()
        .zip(&lambdas)
        .map(|(agg, &lambda)| GridPoint {
            lambda,
            alpha: 0.0,
            theta: 0.0,
            m,
            cv_error: agg.mean,
            cv_se: agg.se,
            failed_folds: agg.failed,
        })
        .collect();
    record_from(Stage::Refine, points, folds, grid.rule)
}

fn stack_test(scores: &[DMatrix<f64>], selected: &[usize]) -> DMatrix<f64> {
    let n = scores[selected[0]].nrows();
    let total: usize = selected.iter().map(|&j| scores[j].ncols()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut col = 0;
    for &j in selected {
        out.columns_mut(col, scores[j].ncols()).copy_from(&scores[j]);
        col += scores[j].ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_examples() {
        let f = split_folds(10, 5, 3).unwrap();
        assert!(f.iter().all(|s| s.len() == 2));
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let sizes: Vec<usize> = split_folds(7, 5, 3).unwrap().iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);

        assert_eq!(split_folds(23, 4, 99).unwrap(), split_folds(23, 4, 99).unwrap());
        assert!(split_folds(3, 5, 0).is_err());
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(2.0, 1e-3, 20);
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 2.0);
        assert!((g[19] - 2e-3).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn alpha_window_on_linear_grid_is_plus_minus_two_tenths() {
        let g: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let close = |a: Vec<f64>, b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(alpha_window(0.5, &g, 2), &[0.3, 0.4, 0.5, 0.6, 0.7]));
        assert!(close(alpha_window(0.1, &g, 2), &[0.1, 0.2, 0.3]));
        assert!(close(alpha_window(0.9, &g, 2), &[0.7, 0.8, 0.9]));
        assert!(close(alpha_window(0.52, &[0.5, 0.6], 0), &[0.5, 0.52]));
    }

    #[test]
    fn step_two_lambdas_respect_bound() {
        let grid = TuningGrid::default();
        let path = log_grid(1.0, 1e-3, 20);
        let l = step_two_lambdas(path[5], Some(&path), &grid);
        assert_eq!(l[0], path[5]);
        assert_eq!(l.len(), 15);
        let free = step_two_lambdas(0.3, None, &grid);
        assert_eq!(free[0], 0.3);
        assert!(free.iter().all(|&v| v <= 0.3));
    }

    fn point(lambda: f64, alpha: f64, err: Option<f64>) -> GridPoint {
        GridPoint {
            lambda,
            alpha,
            theta: 1.0,
            m: 5,
            cv_error: err,
            cv_se: err.map(|_| 0.0),
            failed_folds: usize::from(err.is_none()),
        }
    }

    #[test]
    fn best_point_tie_breaks() {
        let pts = vec![
            point(0.1, 0.5, Some(1.0)),
            point(0.2, 0.3, Some(1.0)),
            point(0.2, 0.7, Some(1.0)),
            point(0.05, 0.9, Some(1.5)),
            point(0.3, 0.9, None),
        ];
        assert_eq!(select_best(&pts), Some(2));
        assert_eq!(select_best(&pts[4..]), None);
        assert_eq!(select_best(&[point(1.0, 0.5, Some(0.3))]), Some(0));
    }

    #[test]
    fn one_se_rule_walks_up_the_minimizers_path() {
        let mut pts = vec![
            point(0.4, 0.5, Some(1.30)),
            point(0.2, 0.5, Some(1.08)),
            point(0.1, 0.5, Some(1.00)),
            point(0.8, 0.9, Some(1.01)),
        ];
        for p in &mut pts {
            p.cv_se = Some(0.1);
        }
        assert_eq!(select_point(&pts, SelectionRule::Min), Some(2));
        // 0.8 is within one SE but on another α path.
        assert_eq!(select_point(&pts, SelectionRule::OneSe), Some(1));
        pts[2].cv_se = Some(0.0);
        assert_eq!(select_point(&pts, SelectionRule::OneSe), Some(2));
    }

    #[test]
    fn aggregate_marks_failures() {
        let per_fold = vec![vec![Some(1.0), Some(2.0)], vec![Some(3.0), None]];
        let a = aggregate(&per_fold);
        assert_eq!(a[0].mean, Some(2.0));
        // Sample sd √2 over √2 folds.
        assert!((a[0].se.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!((a[1].mean, a[1].failed), (None, 1));
    }

    #[test]
    fn grid_validation() {
        assert!(TuningGrid::default().validate().is_ok());
        let bad = TuningGrid {
            folds: 1,
            ..TuningGrid::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TuningGrid {
            alpha_grid: vec![0.0],
            ..TuningGrid::default()
        };
        assert!(bad.validate().is_err());
    }
}
