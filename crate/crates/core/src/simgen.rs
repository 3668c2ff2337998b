//! Synthetic functional predictors on a cosine basis with AR(1) dependence
//! across predictors, sparse coefficient functions with a simple/complex
//! split, and the Monte-Carlo check of the projected complement covariance.
//!
//! Predictor indices are 0-based in memory and 1-based in files.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{grid, Scenario};
use crate::linalg::guarded_cholesky;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Number of simple signals; `⌊q/2⌋` when absent.
    pub q0: Option<usize>,
    pub rho: f64,
    pub sigma: f64,
    pub n_basis: usize,
    /// `ν_k = exp(−k · nu_rate)`.
    pub nu_rate: f64,
    pub scenario: Scenario,
    pub seed: u64,
    pub grid_size: usize,
    pub n_test: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 125,
            p: 100,
            q: 10,
            q0: None,
            rho: 0.5,
            sigma: 1.0,
            n_basis: 30,
            nu_rate: 0.25,
            scenario: Scenario::I,
            seed: 1,
            grid_size: 100,
            n_test: 0,
        }
    }
}

impl SimConfig {
    pub fn q0(&self) -> usize {
        self.q0.unwrap_or(self.q / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.p == 0 {
            return bad("p must be positive".into());
        }
        if self.q > self.p {
            return bad(format!("q = {} exceeds p = {}", self.q, self.p));
        }
        if self.q0() > self.q {
            return bad(format!("q0 = {} exceeds q = {}", self.q0(), self.q));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be nonnegative, got {}", self.sigma));
        }
        if self.n_basis < 2 {
            return bad(format!("n_basis must be at least 2, got {}", self.n_basis));
        }
        if !(self.nu_rate > 0.0 && self.nu_rate.is_finite()) {
            return bad(format!("nu_rate must be positive, got {}", self.nu_rate));
        }
        if self.grid_size == 0 {
            return bad("grid_size must be positive".into());
        }
        Ok(())
    }

    pub fn nu(&self) -> Vec<f64> {
        (1..=self.n_basis)
            .map(|k| (-(k as f64) * self.nu_rate).exp())
            .collect()
    }
}

/// Independent random streams per replicate, so that e.g. changing σ leaves
/// the predictor draws untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Scores = 0,
    Signs = 1,
    Noise = 2,
    TestScores = 3,
    Folds = 4,
}

pub fn stream_rng(seed: u64, replicate: u64, role: StreamRole) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate * 8 + role as u64);
    rng
}

/// `φ₁ = 1`, `φ_k(t) = √2 cos((k − 1)πt)`; `k` is 1-based.
pub fn basis_value(k: usize, t: f64) -> f64 {
    if k == 1 {
        1.0
    } else {
        std::f64::consts::SQRT_2 * ((k - 1) as f64 * std::f64::consts::PI * t).cos()
    }
}

/// Grid values of the first `n_basis` basis functions, `N × n_basis`.
pub fn basis_matrix(n_basis: usize, grid_size: usize) -> DMatrix<f64> {
    let g = grid(grid_size);
    DMatrix::from_fn(grid_size, n_basis, |t, k| basis_value(k + 1, g[t]))
}

/// Standard-normal scores `z_{ijk}` (one `n × n_basis` matrix per predictor)
/// with `corr(z_{ijk}, z_{ij'k}) = ρ^{|j−j'|}` via the AR(1) recursion.
pub fn gen_scores(n: usize, p: usize, n_basis: usize, rho: f64, rng: &mut impl Rng) -> Vec<DMatrix<f64>> {
    let mut out = vec![DMatrix::zeros(n, n_basis); p];
    let innov = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        for k in 0..n_basis {
            let mut prev: f64 = rng.sample(StandardNormal);
            out[0][(i, k)] = prev;
            for z in out.iter_mut().skip(1) {
                let e: f64 = rng.sample(StandardNormal);
                prev = rho * prev + innov * e;
                z[(i, k)] = prev;
            }
        }
    }
    out
}

/// Curves on the grid: `X_j = Z_j diag(ν^{1/2}) Φᵀ`.
pub fn curves_from_scores(scores: &DMatrix<f64>, nu: &[f64], basis: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = scores.clone();
    for (mut col, v) in scaled.column_iter_mut().zip(nu) {
        col *= v.sqrt();
    }
    scaled * basis.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    pub scenario: Scenario,
    pub p: usize,
    pub q: usize,
    pub q0: usize,
    /// `u_{jk}` for `j < q`; `true` flips the sign.
    pub signs: Vec<Vec<bool>>,
    pub gamma: Vec<Vec<bool>>,
    /// Basis coefficients of `β₀ⱼ`, `4(−1)^{u_{jk}} γ_{jk} ν_k`, for every predictor.
    pub coefficients: Vec<DVector<f64>>,
}

impl SimulationTruth {
    pub fn from_signs(cfg: &SimConfig, signs: Vec<Vec<bool>>) -> Result<Self> {
        cfg.validate()?;
        if signs.len() != cfg.q || signs.iter().any(|s| s.len() != cfg.n_basis) {
            return Err(Error::invalid("sign table must be q × n_basis"));
        }
        let q0 = cfg.q0();
        let nu = cfg.nu();
        let gamma: Vec<Vec<bool>> = (0..cfg.q)
            .map(|j| {
                (0..cfg.n_basis)
                    .map(|k| {
                        if j >= q0 {
                            true
                        } else {
                            match cfg.scenario {
                                Scenario::I => k == 0,
                                Scenario::II => k == 1,
                                Scenario::III => k <= 1,
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        let coefficients = (0..cfg.p)
            .map(|j| {
                if j >= cfg.q {
                    return DVector::zeros(cfg.n_basis);
                }
                DVector::from_fn(cfg.n_basis, |k, _| {
                    if !gamma[j][k] {
                        0.0
                    } else if signs[j][k] {
                        -4.0 * nu[k]
                    } else {
                        4.0 * nu[k]
                    }
                })
            })
            .collect();
        Ok(SimulationTruth {
            scenario: cfg.scenario,
            p: cfg.p,
            q: cfg.q,
            q0,
            signs,
            gamma,
            coefficients,
        })
    }

    pub fn signal_set(&self) -> Vec<usize> {
        (0..self.q).collect()
    }

    pub fn simple_set(&self) -> Vec<usize> {
        (0..self.q0).collect()
    }

    pub fn complex_set(&self) -> Vec<usize> {
        (self.q0..self.q).collect()
    }

    pub fn beta_curve(&self, j: usize, grid_size: usize) -> DVector<f64> {
        let g = grid(grid_size);
        let c = &self.coefficients[j];
        DVector::from_fn(grid_size, |t, _| {
            c.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(k, v)| v * basis_value(k + 1, g[t]))
                .sum()
        })
    }

    /// `⟨X_j, β₀ⱼ⟩` for every row of the score matrix, exact in coefficient space.
    pub fn linear_functional(&self, j: usize, scores: &DMatrix<f64>, nu: &[f64]) -> DVector<f64> {
        let w = DVector::from_fn(nu.len(), |k, _| self.coefficients[j][k] * nu[k].sqrt());
        scores * w
    }

    /// Noiseless response `Σ_j ⟨X_j, β₀ⱼ⟩`.
    pub fn noiseless_response(&self, scores: &[DMatrix<f64>], nu: &[f64]) -> DVector<f64> {
        let n = scores.first().map(|s| s.nrows()).unwrap_or(0);
        let mut y = DVector::zeros(n);
        for j in 0..self.q {
            y += self.linear_functional(j, &scores[j], nu);
        }
        y
    }
}

pub fn gen_signs(cfg: &SimConfig, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    (0..cfg.q)
        .map(|_| (0..cfg.n_basis).map(|_| rng.random_bool(0.5)).collect())
        .collect()
}

pub fn gen_coefficients(cfg: &SimConfig, replicate: u64) -> Result<SimulationTruth> {
    let mut rng = stream_rng(cfg.seed, replicate, StreamRole::Signs);
    SimulationTruth::from_signs(cfg, gen_signs(cfg, &mut rng))
}

pub fn gen_response(noiseless: &DVector<f64>, sigma: f64, rng: &mut impl Rng) -> DVector<f64> {
    noiseless.map(|v| {
        let e: f64 = rng.sample(StandardNormal);
        v + sigma * e
    })
}

/// Independent noiseless test sample kept in score form.
#[derive(Debug, Clone)]
pub struct TestSample {
    pub scores: Vec<DMatrix<f64>>,
    pub noiseless: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: SimConfig,
    pub replicate: u64,
    pub scores: Vec<DMatrix<f64>>,
    pub predictors: Vec<DMatrix<f64>>,
    pub noiseless: DVector<f64>,
    pub response: DVector<f64>,
    pub truth: SimulationTruth,
    pub test: Option<TestSample>,
}

impl Simulation {
    pub fn test_predictors(&self) -> Option<Vec<DMatrix<f64>>> {
        let test = self.test.as_ref()?;
        let nu = self.config.nu();
        let basis = basis_matrix(self.config.n_basis, self.config.grid_size);
        Some(test.scores.iter().map(|z| curves_from_scores(z, &nu, &basis)).collect())
    }

    pub fn manifest(&self) -> TruthManifest {
        let to_one = |v: Vec<usize>| v.into_iter().map(|j| j + 1).collect();
        let bits = |t: &Vec<Vec<bool>>| t.iter().map(|r| r.iter().map(|&b| b as u8).collect()).collect();
        TruthManifest {
            config: self.config.clone(),
            replicate: self.replicate,
            signal_set: to_one(self.truth.signal_set()),
            simple_set: to_one(self.truth.simple_set()),
            complex_set: to_one(self.truth.complex_set()),
            signs: bits(&self.truth.signs),
            gamma: bits(&self.truth.gamma),
        }
    }
}

pub fn simulate(cfg: &SimConfig, replicate: u64) -> Result<Simulation> {
    cfg.validate()?;
    let nu = cfg.nu();
    let basis = basis_matrix(cfg.n_basis, cfg.grid_size);
    let truth = gen_coefficients(cfg, replicate)?;

    let mut rng = stream_rng(cfg.seed, replicate, StreamRole::Scores);
    let scores = gen_scores(cfg.n, cfg.p, cfg.n_basis, cfg.rho, &mut rng);
    let predictors = scores.iter().map(|z| curves_from_scores(z, &nu, &basis)).collect();
    let noiseless = truth.noiseless_response(&scores, &nu);
    let mut rng = stream_rng(cfg.seed, replicate, StreamRole::Noise);
    let response = gen_response(&noiseless, cfg.sigma, &mut rng);

    let test = if cfg.n_test > 0 {
        let mut rng = stream_rng(cfg.seed, replicate, StreamRole::TestScores);
        let scores = gen_scores(cfg.n_test, cfg.p, cfg.n_basis, cfg.rho, &mut rng);
        let noiseless = truth.noiseless_response(&scores, &nu);
        Some(TestSample { scores, noiseless })
    } else {
        None
    };

    Ok(Simulation {
        config: cfg.clone(),
        replicate,
        scores,
        predictors,
        noiseless,
        response,
        truth,
        test,
    })
}

/// On-disk description of the ground truth; index sets are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthManifest {
    pub config: SimConfig,
    pub replicate: u64,
    pub signal_set: Vec<usize>,
    pub simple_set: Vec<usize>,
    pub complex_set: Vec<usize>,
    pub signs: Vec<Vec<u8>>,
    pub gamma: Vec<Vec<u8>>,
}

impl TruthManifest {
    pub fn truth(&self) -> Result<SimulationTruth> {
        let signs = self.signs.iter().map(|r| r.iter().map(|&b| b != 0).collect()).collect();
        SimulationTruth::from_signs(&self.config, signs)
    }
}

/// Monte-Carlo check that projecting the complement scores onto the
/// orthogonal complement of the null-space scores shrinks their covariance
/// by exactly `1 − qM₀/n`.
///
/// Predictors share the cosine eigenbasis with score variances
/// `a_m = exp(−m/4)`, kernel eigenvalues `ν_m = (mπ)^{-4}` and AR(1)
/// correlation `ρ` across predictors. The comparison is made in coefficient
/// space (equivalent to comparing kernels because the basis is orthonormal)
/// and the returned value is `max|Â − cT₁| / max|cT₁|`.
pub fn verify_projection_identity(q: usize, m0: usize, n: usize, reps: usize, rho: f64, seed: u64) -> Result<f64> {
    const N_BASIS: usize = 30;
    if q * m0 >= n {
        return Err(Error::invalid(format!("q·M0 = {} must be below n = {n}", q * m0)));
    }
    if m0 >= N_BASIS || reps == 0 || !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid("need M0 < 30, reps > 0 and rho in [0, 1)"));
    }
    let p = q.max(1);
    let m1 = N_BASIS - m0;
    let a: Vec<f64> = (1..=N_BASIS).map(|m| (-(m as f64) / 4.0).exp()).collect();
    let nu: Vec<f64> = (1..=N_BASIS)
        .map(|m| (m as f64 * std::f64::consts::PI).powi(-4))
        .collect();

    let dim = p * m1;
    let mut acc = DMatrix::zeros(dim, dim);
    for rep in 0..reps {
        let mut rng = stream_rng(seed, rep as u64, StreamRole::Scores);
        let z = gen_scores(n, p, N_BASIS, rho, &mut rng);
        // Complement coefficients ν_m^{1/2} a_m^{1/2} ξ for m > M0.
        let u = DMatrix::from_fn(n, dim, |i, c| {
            let (j, m) = (c / m1, m0 + c % m1);
            (nu[m] * a[m]).sqrt() * z[j][(i, m)]
        });
        let hu = if q == 0 || m0 == 0 {
            u
        } else {
            let zs = DMatrix::from_fn(n, q * m0, |i, c| {
                let (j, m) = (c / m0, c % m0);
                a[m].sqrt() * z[j][(i, m)]
            });
            let chol = guarded_cholesky(&zs.tr_mul(&zs), 1e12, "null-score Gram")?;
            let coef = chol.solve(&zs.tr_mul(&u));
            &u - &zs * coef
        };
        // H is a symmetric idempotent projection, so UᵀHU = (HU)ᵀ(HU).
        acc += hu.tr_mul(&hu) / n as f64;
    }
    acc /= reps as f64;

    let c = 1.0 - (q * m0) as f64 / n as f64;
    let target = DMatrix::from_fn(dim, dim, |r, s| {
        let (j, m) = (r / m1, m0 + r % m1);
        let (jj, mm) = (s / m1, m0 + s % m1);
        if m == mm {
            c * rho.powi((j as i32 - jj as i32).abs()) * a[m] * nu[m]
        } else {
            0.0
        }
    });
    let scale = target.amax();
    Ok((&acc - &target).amax() / scale)
}
