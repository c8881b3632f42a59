//! Synthetic data-generating processes with exact nuisance truths, estimand oracles, and the
//! Monte Carlo studies built on them.
//!
//! Covariates are uniform on `[-1, 1]^d`. Propensities are logistic in an index whose
//! coefficients have ℓ1 norm `overlap ≤ ln 9`, so every propensity lies in `[0.1, 0.9]`.
//! Sequential kinds draw `S₂(t₁) = 0.5·S₁[j mod d₁] + 0.3·t₁ + 0.2·U` with `U` uniform on
//! `[-1, 1]^{d₂}`, so every nuisance truth and every path mean has a closed form.
//!
//! Every replication of a study draws its randomness from `(seed, replication, n)` alone,
//! so study outputs do not depend on the number of worker threads.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drscores::{delta_terms, CateNuisance, CateObservation, DteObservation, Predictor, SequentialNuisance};
use crate::estimators::{estimate_ate, estimate_cate, estimate_dte, Learner, LearnerSpec};
use crate::nnet::{sigmoid, MlpConfig};
use crate::{seed, stats, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    CateLinear,
    CateSparseSmooth,
    CateRoughOutcome,
    DteLinear,
    DteSparseSmooth,
    CdeBinary,
}

impl DgpKind {
    pub const ALL: [DgpKind; 6] = [
        DgpKind::CateLinear,
        DgpKind::CateSparseSmooth,
        DgpKind::CateRoughOutcome,
        DgpKind::DteLinear,
        DgpKind::DteSparseSmooth,
        DgpKind::CdeBinary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::CateLinear => "cate_linear",
            DgpKind::CateSparseSmooth => "cate_sparse_smooth",
            DgpKind::CateRoughOutcome => "cate_rough_outcome",
            DgpKind::DteLinear => "dte_linear",
            DgpKind::DteSparseSmooth => "dte_sparse_smooth",
            DgpKind::CdeBinary => "cde_binary",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, DgpKind::DteLinear | DgpKind::DteSparseSmooth | DgpKind::CdeBinary)
    }
}

/// Data-generating process. `d` is the covariate dimension (`d₁` for sequential kinds),
/// `q` the number of active coordinates of the sparse components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub kind: DgpKind,
    pub d: usize,
    pub d2: usize,
    pub q: usize,
    pub noise_sd: f64,
    pub coef_seed: u64,
    /// ℓ1 norm of the propensity index coefficients, at most `ln 9`.
    pub overlap: f64,
    pub intercept: f64,
    /// Scale of every structural coefficient other than the intercept.
    pub signal: f64,
}

/// Largest index magnitude keeping logistic propensities in `[0.1, 0.9]`.
pub const MAX_OVERLAP: f64 = 2.197_224_577_336_219_6;

impl DgpConfig {
    pub fn new(kind: DgpKind) -> Self {
        Self { kind, d: 5, d2: 3, q: 2, noise_sd: 1.0, coef_seed: 0, overlap: 1.5, intercept: 1.0, signal: 1.0 }
    }

    pub fn with_dims(mut self, d: usize, d2: usize, q: usize) -> Self {
        self.d = d;
        self.d2 = d2;
        self.q = q;
        self
    }

    pub fn with_noise(mut self, sd: f64) -> Self {
        self.noise_sd = sd;
        self
    }

    pub fn with_signal(mut self, intercept: f64, signal: f64) -> Self {
        self.intercept = intercept;
        self.signal = signal;
        self
    }

    pub fn with_overlap(mut self, overlap: f64) -> Self {
        self.overlap = overlap;
        self
    }

    pub fn with_coef_seed(mut self, s: u64) -> Self {
        self.coef_seed = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.q == 0 || self.q > self.d {
            return fail(format!("need 1 <= q <= d, got q={} d={}", self.q, self.d));
        }
        if self.kind.is_sequential() && self.d2 == 0 {
            return fail("sequential kinds need d2 >= 1".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return fail(format!("noise_sd must be finite and nonnegative, got {}", self.noise_sd));
        }
        if !(self.overlap >= 0.0 && self.overlap <= MAX_OVERLAP) {
            return fail(format!("overlap must lie in [0, ln 9], got {}", self.overlap));
        }
        if !self.intercept.is_finite() || !self.signal.is_finite() {
            return fail("intercept and signal must be finite".into());
        }
        Ok(())
    }
}

fn sawtooth(x: f64) -> f64 {
    2.0 * (x - (x + 0.5).floor())
}

/// `E cos(π(c + 0.2U))` over `U ~ U[-1, 1]` equals `SINC · cos(πc)`.
fn sinc_factor() -> f64 {
    (0.2 * PI).sin() / (0.2 * PI)
}

/// `E cos(π(0.5S + c))` over `S ~ U[-1, 1]`.
fn mean_cos_half(c: f64) -> f64 {
    ((PI * (0.5 + c)).sin() - (PI * (c - 0.5)).sin()) / PI
}

/// Structural coefficients, drawn once from `coef_seed`.
#[derive(Clone, Debug)]
struct Coefs {
    kind: DgpKind,
    d: usize,
    d2: usize,
    q: usize,
    intercept: f64,
    /// Propensity index `a0 + a·s` (first exposure).
    a0: f64,
    a: Vec<f64>,
    /// Second-exposure index `b0 + b·s̄₂`.
    b0: f64,
    b: Vec<f64>,
    /// Outcome coefficients on `s` / `s₁`.
    beta: Vec<f64>,
    /// Linear effect coefficients (`cate_linear`) or second-stage coefficients.
    gamma: Vec<f64>,
    /// Sawtooth amplitudes and phases (`cate_rough_outcome`).
    amp: Vec<f64>,
    phase: Vec<f64>,
    tau1: f64,
    tau2: f64,
}

fn signed(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(0.5..1.0);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Rescales `(a0, a)` to ℓ1 norm `target`.
fn scale_l1(a0: &mut f64, a: &mut [f64], target: f64) {
    let norm = a0.abs() + a.iter().map(|v| v.abs()).sum::<f64>();
    if norm > 0.0 {
        let f = target / norm;
        *a0 *= f;
        a.iter_mut().for_each(|v| *v *= f);
    }
}

impl Coefs {
    fn new(c: &DgpConfig) -> Self {
        let mut rng = seed::child_rng(c.coef_seed, &[seed::tag(c.kind.name())]);
        let (d, d2, q) = (c.d, c.d2, c.q);
        let mut a0 = rng.random_range(-0.2..0.2);
        let mut a: Vec<f64> = (0..d).map(|j| if j < q { signed(&mut rng) } else { 0.0 }).collect();
        scale_l1(&mut a0, &mut a, c.overlap);
        let mut b0 = rng.random_range(-0.2..0.2);
        let mut b: Vec<f64> =
            (0..d + d2).map(|j| if j < q || (j >= d && j < d + q.min(d2)) { signed(&mut rng) } else { 0.0 }).collect();
        scale_l1(&mut b0, &mut b, c.overlap);
        let s = c.signal;
        let beta: Vec<f64> = match c.kind {
            DgpKind::CateLinear => (0..d).map(|_| s * rng.random_range(-1.0..1.0)).collect(),
            _ => (0..d).map(|j| if j < q { s * signed(&mut rng) } else { 0.0 }).collect(),
        };
        let gamma: Vec<f64> = match c.kind {
            DgpKind::CateLinear => (0..d).map(|j| if j < q { s * signed(&mut rng) } else { 0.0 }).collect(),
            DgpKind::DteSparseSmooth => (0..d2).map(|j| if j < q { s * signed(&mut rng) } else { 0.0 }).collect(),
            _ => (0..d2).map(|_| s * rng.random_range(-1.0..1.0)).collect(),
        };
        let amp: Vec<f64> = (0..d).map(|_| s * rng.random_range(0.5..1.0)).collect();
        let phase: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let tau1 = s * rng.random_range(0.5..1.0);
        let tau2 = s * rng.random_range(0.5..1.0);
        Self { kind: c.kind, d, d2, q, intercept: c.intercept, a0, a, b0, b, beta, gamma, amp, phase, tau1, tau2 }
    }

    fn dot(w: &[f64], x: &[f64]) -> f64 {
        w.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    fn pi(&self, s: &[f64]) -> f64 {
        sigmoid(self.a0 + Self::dot(&self.a, s)).clamp(0.1, 0.9)
    }

    fn rho(&self, sbar: &[f64]) -> f64 {
        sigmoid(self.b0 + Self::dot(&self.b, sbar)).clamp(0.1, 0.9)
    }

    /// Smooth sparse effect: chained products of cosines over the active coordinates.
    fn smooth_effect(&self, s: &[f64]) -> f64 {
        let c = |j: usize| (PI * s[j]).cos();
        if self.q == 1 {
            c(0)
        } else {
            (0..self.q - 1).map(|j| c(j) * c(j + 1)).sum()
        }
    }

    fn cate(&self, s: &[f64]) -> f64 {
        match self.kind {
            DgpKind::CateLinear => Self::dot(&self.gamma, s),
            _ => self.tau1 * self.smooth_effect(s),
        }
    }

    fn mu0(&self, s: &[f64]) -> f64 {
        let k = self.intercept;
        match self.kind {
            DgpKind::CateLinear => k + Self::dot(&self.beta, s),
            DgpKind::CateSparseSmooth => {
                k + (0..self.q).map(|j| self.beta[j] * s[j] + 0.5 * self.beta[j].abs() * (PI * s[j]).cos()).sum::<f64>()
            }
            _ => k + (0..self.d).map(|j| self.amp[j] * sawtooth(4.0 * s[j] + self.phase[j])).sum::<f64>(),
        }
    }

    fn mu(&self, t: bool, s: &[f64]) -> f64 {
        self.mu0(s) + if t { self.cate(s) } else { 0.0 }
    }

    fn s2(&self, s1: &[f64], t1: bool, u: &[f64]) -> Vec<f64> {
        (0..self.d2).map(|j| 0.5 * s1[j % self.d] + 0.3 * f64::from(u8::from(t1)) + 0.2 * u[j]).collect()
    }

    /// `E{Y(t₁,t₂) | S₁ = s₁, S₂(t₁) = s₂}`.
    fn path_regression(&self, t1: bool, t2: bool, s1: &[f64], s2: &[f64]) -> f64 {
        let tau = self.tau1 * f64::from(u8::from(t1)) + self.tau2 * f64::from(u8::from(t2));
        match self.kind {
            DgpKind::DteSparseSmooth => {
                self.intercept
                    + tau
                    + (0..self.q).map(|j| self.beta[j] * (PI * s1[j]).cos()).sum::<f64>()
                    + (0..self.d2).map(|j| self.gamma[j] * (PI * s2[j]).cos()).sum::<f64>()
            }
            _ => self.intercept + tau + Self::dot(&self.beta, s1) + Self::dot(&self.gamma, s2),
        }
    }

    fn nu(&self, sbar: &[f64]) -> f64 {
        self.path_regression(true, true, &sbar[..self.d], &sbar[self.d..])
    }

    /// `E{Y(t₁,t₂) | S₁ = s₁}`.
    fn path_given_s1(&self, t1: bool, t2: bool, s1: &[f64]) -> f64 {
        let shift = 0.3 * f64::from(u8::from(t1));
        let tau = self.tau1 * f64::from(u8::from(t1)) + self.tau2 * f64::from(u8::from(t2));
        let centre = |j: usize| 0.5 * s1[j % self.d] + shift;
        match self.kind {
            DgpKind::DteSparseSmooth => {
                self.intercept
                    + tau
                    + (0..self.q).map(|j| self.beta[j] * (PI * s1[j]).cos()).sum::<f64>()
                    + (0..self.d2).map(|j| self.gamma[j] * sinc_factor() * (PI * centre(j)).cos()).sum::<f64>()
            }
            _ => {
                self.intercept
                    + tau
                    + Self::dot(&self.beta, s1)
                    + (0..self.d2).map(|j| self.gamma[j] * centre(j)).sum::<f64>()
            }
        }
    }

    fn path_mean(&self, t1: bool, t2: bool) -> f64 {
        let shift = 0.3 * f64::from(u8::from(t1));
        let tau = self.tau1 * f64::from(u8::from(t1)) + self.tau2 * f64::from(u8::from(t2));
        match self.kind {
            DgpKind::DteSparseSmooth => {
                self.intercept + tau + self.gamma.iter().map(|g| g * sinc_factor() * mean_cos_half(shift)).sum::<f64>()
            }
            _ => self.intercept + tau + self.gamma.iter().map(|g| g * shift).sum::<f64>(),
        }
    }

    fn ate(&self) -> f64 {
        0.0
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn noise(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    }
}

fn func(name: &str, c: &Arc<Coefs>, f: impl Fn(&Coefs, &[f64]) -> f64 + Send + Sync + 'static) -> Predictor<f64> {
    let c = Arc::clone(c);
    Predictor::function(name, move |x| f(&c, x))
}

/// Exact nuisances and potential outcomes of a CATE dataset.
#[derive(Clone, Debug)]
pub struct CateTruth {
    pub pi: Predictor<f64>,
    pub mu0: Predictor<f64>,
    pub mu1: Predictor<f64>,
    pub cate: Predictor<f64>,
    pub ate: f64,
    /// `[Y(0), Y(1)]` per row.
    pub potential_outcomes: Vec<[f64; 2]>,
}

impl CateTruth {
    pub fn nuisance(&self) -> CateNuisance<f64> {
        CateNuisance::new(self.pi.clone(), self.mu0.clone(), self.mu1.clone())
    }
}

/// Exact nuisances of the path `(1, 1)` and potential outcomes of a sequential dataset.
#[derive(Clone, Debug)]
pub struct SequentialTruth {
    pub pi: Predictor<f64>,
    pub rho: Predictor<f64>,
    pub nu: Predictor<f64>,
    pub mu: Predictor<f64>,
    /// `E{Y(1,1)}`.
    pub theta: f64,
    /// `E{Y(t₁,t₂)}` indexed by `2·t₁ + t₂`.
    pub path_means: [f64; 4],
    /// `Y(t₁,t₂)` per row, indexed by `2·t₁ + t₂`.
    pub potential_outcomes: Vec<[f64; 4]>,
}

impl SequentialTruth {
    pub fn nuisance(&self) -> SequentialNuisance<f64> {
        SequentialNuisance::new(self.pi.clone(), self.rho.clone(), self.nu.clone(), self.mu.clone())
    }

    pub fn path_mean(&self, t1: bool, t2: bool) -> f64 {
        self.path_means[2 * usize::from(t1) + usize::from(t2)]
    }
}

fn require(config: &DgpConfig, sequential: bool) -> Result<()> {
    config.validate()?;
    if config.kind.is_sequential() != sequential {
        let want = if sequential { "a sequential" } else { "a CATE" };
        return Err(Error::Config(format!("{} is not {want} kind", config.kind.name())));
    }
    Ok(())
}

fn cate_truth_functions(c: &Arc<Coefs>) -> (Predictor<f64>, Predictor<f64>, Predictor<f64>, Predictor<f64>) {
    (
        func("pi", c, |c, s| c.pi(s)),
        func("mu0", c, |c, s| c.mu(false, s)),
        func("mu1", c, |c, s| c.mu(true, s)),
        func("cate", c, |c, s| c.cate(s)),
    )
}

/// CATE dataset of `n` rows. Both potential outcomes share the noise draw, so
/// `Y(1) - Y(0) = θ(S)` exactly.
pub fn gen_cate(config: &DgpConfig, n: usize, seed_: u64) -> Result<(Vec<CateObservation<f64>>, CateTruth)> {
    require(config, false)?;
    let c = Arc::new(Coefs::new(config));
    let mut rng = seed::rng(seed_);
    let mut data = Vec::with_capacity(n);
    let mut po = Vec::with_capacity(n);
    for _ in 0..n {
        let s = uniform_vec(&mut rng, config.d);
        let t = rng.random_bool(c.pi(&s));
        let e = noise(&mut rng, config.noise_sd);
        let y01 = [c.mu(false, &s) + e, c.mu(true, &s) + e];
        data.push(CateObservation { y: y01[usize::from(t)], s, t });
        po.push(y01);
    }
    let (pi, mu0, mu1, cate) = cate_truth_functions(&c);
    Ok((data, CateTruth { pi, mu0, mu1, cate, ate: c.ate(), potential_outcomes: po }))
}

/// Sequential dataset of `n` rows. For `cde_binary` the second exposure is the mediator and
/// is emitted in both `t2` and `m`.
pub fn gen_dte(config: &DgpConfig, n: usize, seed_: u64) -> Result<(Vec<DteObservation<f64>>, SequentialTruth)> {
    require(config, true)?;
    let c = Arc::new(Coefs::new(config));
    let mut rng = seed::rng(seed_);
    let mut data = Vec::with_capacity(n);
    let mut po = Vec::with_capacity(n);
    for _ in 0..n {
        let s1 = uniform_vec(&mut rng, c.d);
        let t1 = rng.random_bool(c.pi(&s1));
        let u = uniform_vec(&mut rng, c.d2);
        let s2_paths = [c.s2(&s1, false, &u), c.s2(&s1, true, &u)];
        let s2 = s2_paths[usize::from(t1)].clone();
        let mut sbar = s1.clone();
        sbar.extend_from_slice(&s2);
        let t2 = rng.random_bool(c.rho(&sbar));
        let e = noise(&mut rng, config.noise_sd);
        let mut ys = [0.0; 4];
        for (p, y) in ys.iter_mut().enumerate() {
            let (a, b) = (p >= 2, p % 2 == 1);
            *y = c.path_regression(a, b, &s1, &s2_paths[usize::from(a)]) + e;
        }
        let y = ys[2 * usize::from(t1) + usize::from(t2)];
        let m = (config.kind == DgpKind::CdeBinary).then_some(i64::from(t2));
        data.push(DteObservation { s1, s2, t1, t2, y, m });
        po.push(ys);
    }
    Ok((data, sequential_truth(&c, po)))
}

fn sequential_truth(c: &Arc<Coefs>, po: Vec<[f64; 4]>) -> SequentialTruth {
    let path_means =
        [c.path_mean(false, false), c.path_mean(false, true), c.path_mean(true, false), c.path_mean(true, true)];
    SequentialTruth {
        pi: func("pi", c, |c, s| c.pi(s)),
        rho: func("rho", c, |c, s| c.rho(s)),
        nu: func("nu", c, |c, s| c.nu(s)),
        mu: func("mu", c, |c, s| c.path_given_s1(true, true, s)),
        theta: path_means[3],
        path_means,
        potential_outcomes: po,
    }
}

/// Closed-form target: `E{Y(1) - Y(0)}` for CATE kinds, `E{Y(1,1)}` for sequential kinds.
pub fn analytic_theta(config: &DgpConfig) -> Result<f64> {
    config.validate()?;
    let c = Coefs::new(config);
    Ok(if config.kind.is_sequential() { c.path_mean(true, true) } else { c.ate() })
}

/// CATE truth functions without drawing data.
pub fn cate_truth(config: &DgpConfig) -> Result<CateTruth> {
    require(config, false)?;
    let c = Arc::new(Coefs::new(config));
    let (pi, mu0, mu1, cate) = cate_truth_functions(&c);
    Ok(CateTruth { pi, mu0, mu1, cate, ate: c.ate(), potential_outcomes: Vec::new() })
}

/// Sequential truth functions without drawing data.
pub fn sequential_truth_of(config: &DgpConfig) -> Result<SequentialTruth> {
    require(config, true)?;
    Ok(sequential_truth(&Arc::new(Coefs::new(config)), Vec::new()))
}

/// Brute-force Monte Carlo value of the target of [`analytic_theta`], drawing fresh potential
/// outcomes. Returns the estimate and its standard error.
pub fn oracle_theta(config: &DgpConfig, n_mc: usize, seed_: u64) -> Result<(f64, f64)> {
    if n_mc < 10_000 {
        return Err(Error::Config(format!("n_mc must be at least 10000, got {n_mc}")));
    }
    let draws: Vec<f64> = if config.kind.is_sequential() {
        gen_dte(config, n_mc, seed_)?.1.potential_outcomes.iter().map(|p| p[3]).collect()
    } else {
        gen_cate(config, n_mc, seed_)?.1.potential_outcomes.iter().map(|p| p[1] - p[0]).collect()
    };
    Ok(stats::mean_se(&draws))
}

/// A sample moment with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub label: String,
    pub mean: f64,
    pub se: f64,
}

impl Moment {
    fn of(label: impl Into<String>, xs: &[f64]) -> Self {
        let (mean, se) = stats::mean_se(xs);
        Self { label: label.into(), mean, se }
    }

    /// `|mean| ≤ 4·se`.
    pub fn centred(&self) -> bool {
        self.mean.abs() <= 4.0 * self.se
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub perturbation_scale: f64,
    pub n: usize,
    pub mean_delta1: f64,
    pub se_delta1: f64,
    pub mean_delta2: f64,
    pub se_delta2: f64,
    pub mean_delta2_sq: f64,
    /// `Δ₁` and `Δ₁·S_j` for each active coordinate `j`.
    pub moments: Vec<Moment>,
    pub moments_centred: bool,
}

/// Evaluates the error decomposition of the CATE pseudo-outcome at perturbed nuisances.
///
/// `perturbation_scale` is the size of the product of nuisance errors: the propensity logit
/// and both outcome regressions are each shifted by `√scale` times a fixed smooth function
/// bounded by one, so `Δ₁` is of order `√scale` and `Δ₂` of order `scale`.
pub fn orthogonality_study(
    config: &DgpConfig,
    perturbation_scale: f64,
    n: usize,
    seed_: u64,
) -> Result<OrthogonalityReport> {
    if !(perturbation_scale >= 0.0 && perturbation_scale.is_finite()) {
        return Err(Error::Config(format!(
            "perturbation scale must be finite and nonnegative, got {perturbation_scale}"
        )));
    }
    if n < 2 {
        return Err(Error::Config("need at least two draws".into()));
    }
    let (data, truth) = gen_cate(config, n, seed_)?;
    let h = perturbation_scale.sqrt();
    let q = config.q;
    let pi0 = truth.pi.clone();
    let (m0, m1) = (truth.mu0.clone(), truth.mu1.clone());
    let hat = CateNuisance::new(
        Predictor::function("pi_perturbed", move |s| {
            let p = pi0.predict(s);
            if h == 0.0 {
                return p;
            }
            sigmoid((p / (1.0 - p)).ln() + h * (0.5 * PI * s[0] + 0.3).sin())
        }),
        Predictor::function("mu0_perturbed", move |s| m0.predict(s) + h * (0.5 * PI * s[q - 1]).cos()),
        Predictor::function("mu1_perturbed", move |s| m1.predict(s) - h * (PI * s[0]).sin() * 0.5 - h * 0.5),
    );
    let nuis0 = truth.nuisance();
    let terms: Vec<(f64, f64)> = data
        .iter()
        .map(|o| {
            let d = delta_terms(o, &hat, &nuis0);
            (d.delta1(), d.delta2())
        })
        .collect();
    let d1: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let d2: Vec<f64> = terms.iter().map(|t| t.1).collect();
    let d2sq: Vec<f64> = d2.iter().map(|v| v * v).collect();
    let mut moments = vec![Moment::of("delta1", &d1)];
    for j in 0..q {
        let xs: Vec<f64> = d1.iter().zip(&data).map(|(v, o)| v * o.s[j]).collect();
        moments.push(Moment::of(format!("delta1*s{}", j + 1), &xs));
    }
    let (m1_, s1_) = stats::mean_se(&d1);
    let (m2_, s2_) = stats::mean_se(&d2);
    let moments_centred = moments.iter().all(Moment::centred);
    Ok(OrthogonalityReport {
        perturbation_scale,
        n,
        mean_delta1: m1_,
        se_delta1: s1_,
        mean_delta2: m2_,
        se_delta2: s2_,
        mean_delta2_sq: stats::mean(&d2sq),
        moments,
        moments_centred,
    })
}

/// Orthogonality at `scale` and `scale / 2` on the same draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityDiagnostic {
    pub full: OrthogonalityReport,
    pub half: OrthogonalityReport,
    /// `mean(Δ₂²)` at `scale` over that at `scale / 2`; absent when the latter is zero.
    pub delta2_sq_ratio: Option<f64>,
    pub passed: bool,
}

/// Passes when all first moments are centred at both scales and the `Δ₂²` ratio lies in
/// `[3, 5]` (or `scale = 0`).
pub fn orthogonality_diagnostic(
    config: &DgpConfig,
    scale: f64,
    n: usize,
    seed_: u64,
) -> Result<OrthogonalityDiagnostic> {
    let full = orthogonality_study(config, scale, n, seed_)?;
    let half = orthogonality_study(config, scale / 2.0, n, seed_)?;
    let delta2_sq_ratio = (half.mean_delta2_sq > 0.0).then(|| full.mean_delta2_sq / half.mean_delta2_sq);
    let ratio_ok = scale == 0.0 || delta2_sq_ratio.is_some_and(|r| (3.0..=5.0).contains(&r));
    let passed = full.moments_centred && half.moments_centred && ratio_ok;
    Ok(OrthogonalityDiagnostic { full, half, delta2_sq_ratio, passed })
}

/// Target of a coverage study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageTarget {
    Ate,
    Dte,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageStudy {
    pub target: CoverageTarget,
    pub spec: LearnerSpec,
    pub k: usize,
    pub reps: usize,
    pub n: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub coverage: f64,
    pub mean_ci_width: f64,
    pub truth: f64,
    pub reps: usize,
    pub n: usize,
    pub alpha: f64,
    /// `[theta_hat, ci_lower, ci_upper]` per replication.
    pub per_rep: Vec<[f64; 3]>,
}

fn rep_seed(master: u64, rep: usize) -> u64 {
    seed::derive(master, &[seed::tag("rep"), rep as u64])
}

fn data_seed(rep_seed: u64, n: usize) -> u64 {
    seed::derive(rep_seed, &[seed::tag("data"), n as u64])
}

/// Fraction of replications whose confidence interval contains the analytic target.
pub fn coverage_study(config: &DgpConfig, study: &CoverageStudy, seed_: u64) -> Result<CoverageReport> {
    if study.reps < 100 {
        return Err(Error::Config(format!("coverage needs at least 100 replications, got {}", study.reps)));
    }
    let sequential = study.target == CoverageTarget::Dte;
    require(config, sequential)?;
    let truth = analytic_theta(config)?;
    let per_rep: Vec<[f64; 3]> = (0..study.reps)
        .into_par_iter()
        .map(|r| {
            let rs = rep_seed(seed_, r);
            let ds = data_seed(rs, study.n);
            let rep = if sequential {
                estimate_dte(&gen_dte(config, study.n, ds)?.0, &study.spec, study.k, study.alpha, rs)?
            } else {
                estimate_ate(&gen_cate(config, study.n, ds)?.0, &study.spec, study.k, study.alpha, rs)?
            };
            Ok([rep.theta_hat, rep.ci[0], rep.ci[1]])
        })
        .collect::<Result<_>>()?;
    let covered = per_rep.iter().filter(|r| r[1] <= truth && truth <= r[2]).count();
    Ok(CoverageReport {
        coverage: covered as f64 / study.reps as f64,
        mean_ci_width: stats::mean(&per_rep.iter().map(|r| r[2] - r[1]).collect::<Vec<_>>()),
        truth,
        reps: study.reps,
        n: study.n,
        alpha: study.alpha,
        per_rep,
    })
}

/// Fixed evaluation points for CATE mean squared error.
pub fn test_grid(config: &DgpConfig, points: usize, seed_: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::child_rng(seed_, &[seed::tag("grid")]);
    (0..points).map(|_| uniform_vec(&mut rng, config.d)).collect()
}

/// Number of evaluation points used by the CATE studies.
pub const TEST_GRID_POINTS: usize = 2000;

fn cate_mse(
    config: &DgpConfig,
    spec: &LearnerSpec,
    final_stage: &MlpConfig<f64>,
    n: usize,
    rs: u64,
    grid: &[Vec<f64>],
) -> Result<f64> {
    let (data, truth) = gen_cate(config, n, data_seed(rs, n))?;
    let est = estimate_cate(&data, spec, final_stage, seed::derive(rs, &[n as u64]))?;
    Ok(stats::mean(&grid.iter().map(|s| (est.predict(s) - truth.cate.predict(s)).powi(2)).collect::<Vec<_>>()))
}

fn check_grid(n_grid: &[usize], min_len: usize) -> Result<()> {
    if n_grid.len() < min_len || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("n_grid must be strictly increasing with at least {min_len} points")));
    }
    Ok(())
}

/// CATE test MSE per replication and sample size: `[rep][n index]`.
fn mse_table(
    config: &DgpConfig,
    spec: &LearnerSpec,
    final_stage: &MlpConfig<f64>,
    n_grid: &[usize],
    reps: usize,
    seed_: u64,
) -> Result<Vec<Vec<f64>>> {
    require(config, false)?;
    let grid = test_grid(config, TEST_GRID_POINTS, seed_);
    let jobs: Vec<(usize, usize)> = (0..reps).flat_map(|r| (0..n_grid.len()).map(move |j| (r, j))).collect();
    let flat: Vec<f64> = jobs
        .into_par_iter()
        .map(|(r, j)| cate_mse(config, spec, final_stage, n_grid[j], rep_seed(seed_, r), &grid))
        .collect::<Result<_>>()?;
    Ok(flat.chunks(n_grid.len()).map(<[f64]>::to_vec).collect())
}

fn column_means(table: &[Vec<f64>]) -> Vec<f64> {
    (0..table[0].len()).map(|j| stats::mean(&table.iter().map(|r| r[j]).collect::<Vec<_>>())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub n_grid: Vec<usize>,
    pub per_n_mse: Vec<f64>,
    /// Least-squares slope of `ln MSE` on `ln n`.
    pub slope: f64,
    pub per_rep_mse: Vec<Vec<f64>>,
}

/// Empirical convergence rate of the DR-learner.
pub fn rate_slope_study(
    config: &DgpConfig,
    spec: &LearnerSpec,
    final_stage: &MlpConfig<f64>,
    n_grid: &[usize],
    reps: usize,
    seed_: u64,
) -> Result<RateReport> {
    check_grid(n_grid, 3)?;
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let table = mse_table(config, spec, final_stage, n_grid, reps, seed_)?;
    let per_n_mse = column_means(&table);
    let lx: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = per_n_mse.iter().map(|m| m.ln()).collect();
    Ok(RateReport { n_grid: n_grid.to_vec(), slope: stats::ols_slope(&lx, &ly), per_n_mse, per_rep_mse: table })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspecification {
    MuWrong,
    PiWrong,
    BothWrong,
}

impl Misspecification {
    pub const ALL: [Misspecification; 3] =
        [Misspecification::MuWrong, Misspecification::PiWrong, Misspecification::BothWrong];

    /// Replaces the designated learners by the covariate-blind constant learner.
    pub fn apply(self, spec: &LearnerSpec) -> LearnerSpec {
        let mut s = spec.clone();
        if matches!(self, Misspecification::MuWrong | Misspecification::BothWrong) {
            s.mu = Learner::Constant;
            s.mu0 = None;
            s.mu1 = None;
        }
        if matches!(self, Misspecification::PiWrong | Misspecification::BothWrong) {
            s.pi = Learner::Constant;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessArm {
    pub misspec: Misspecification,
    pub n_grid: Vec<usize>,
    pub per_n_mse: Vec<f64>,
    pub per_rep_mse: Vec<Vec<f64>>,
    /// Share of replications whose MSE at the largest `n` is below that at the smallest.
    pub fraction_decreasing: f64,
    /// Mean MSE at the largest `n` over mean MSE at the smallest.
    pub mse_ratio: f64,
}

impl RobustnessArm {
    /// Single misspecification: decreasing in at least 80% of replications. Both wrong: the
    /// MSE does not fall below half its small-sample value.
    pub fn passed(&self) -> bool {
        match self.misspec {
            Misspecification::BothWrong => self.mse_ratio >= 0.5,
            _ => self.fraction_decreasing >= 0.8,
        }
    }
}

/// CATE MSE across `n_grid` with one or both nuisance families replaced by a constant.
/// Replications share datasets across arms.
pub fn double_robustness_study(
    config: &DgpConfig,
    misspec: Misspecification,
    spec: &LearnerSpec,
    final_stage: &MlpConfig<f64>,
    n_grid: &[usize],
    reps: usize,
    seed_: u64,
) -> Result<RobustnessArm> {
    check_grid(n_grid, 2)?;
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let table = mse_table(config, &misspec.apply(spec), final_stage, n_grid, reps, seed_)?;
    let per_n_mse = column_means(&table);
    let last = n_grid.len() - 1;
    let decreasing = table.iter().filter(|r| r[last] < r[0]).count();
    Ok(RobustnessArm {
        misspec,
        n_grid: n_grid.to_vec(),
        mse_ratio: per_n_mse[last] / per_n_mse[0],
        per_n_mse,
        fraction_decreasing: decreasing as f64 / reps as f64,
        per_rep_mse: table,
    })
}

/// Default settings of the packaged studies.
pub mod presets {
    use super::*;

    /// Correctly specified linear sequential design for coverage studies.
    pub fn coverage_dgp() -> DgpConfig {
        DgpConfig::new(DgpKind::DteLinear)
    }

    pub fn coverage_study() -> CoverageStudy {
        CoverageStudy { target: CoverageTarget::Dte, spec: LearnerSpec::lasso(), k: 5, reps: 500, n: 2000, alpha: 0.05 }
    }

    /// Confounded linear design whose nuisances Lasso learns consistently.
    pub fn double_robustness_dgp() -> DgpConfig {
        DgpConfig::new(DgpKind::CateLinear)
    }

    pub fn double_robustness_grid() -> Vec<usize> {
        vec![1000, 4000]
    }

    pub const DOUBLE_ROBUSTNESS_REPS: usize = 30;

    /// Smooth sparse effect with enough signal relative to the pseudo-outcome noise for the
    /// final stage to learn it at desk-scale sample sizes.
    pub fn rate_slope_dgp() -> DgpConfig {
        DgpConfig::new(DgpKind::CateSparseSmooth).with_noise(0.5).with_overlap(1.0).with_signal(1.0, 2.0)
    }

    pub fn rate_slope_grid() -> Vec<usize> {
        vec![500, 1000, 2000, 4000]
    }

    pub const RATE_SLOPE_REPS: usize = 20;

    /// Final-stage network of the CATE studies.
    pub fn cate_final_stage() -> MlpConfig<f64> {
        MlpConfig::new(2, 16).with_step_size(0.05)
    }

    pub fn orthogonality_dgp() -> DgpConfig {
        DgpConfig::new(DgpKind::CateLinear)
    }

    pub const ORTHOGONALITY_N: usize = 100_000;
    pub const ORTHOGONALITY_SCALE: f64 = 0.3;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sawtooth_range_and_period() {
        assert_eq!(sawtooth(0.0), 0.0);
        assert!((sawtooth(0.25) - 0.5).abs() < 1e-15);
        assert!((sawtooth(1.25) - 0.5).abs() < 1e-12);
        assert!(sawtooth(0.4999) > 0.99);
    }

    #[test]
    fn cosine_expectations_match_quadrature() {
        let m = 200_000;
        let grid = |f: &dyn Fn(f64) -> f64| {
            (0..m).map(|i| f(-1.0 + (i as f64 + 0.5) * 2.0 / m as f64)).sum::<f64>() / m as f64
        };
        let c = 0.37;
        assert!((grid(&|u| (PI * (c + 0.2 * u)).cos()) - sinc_factor() * (PI * c).cos()).abs() < 1e-9);
        for shift in [0.0, 0.3] {
            assert!((grid(&|s| (PI * (0.5 * s + shift)).cos()) - mean_cos_half(shift)).abs() < 1e-9);
        }
    }

    #[test]
    fn propensity_coefficients_respect_overlap() {
        for kind in DgpKind::ALL {
            let c = Coefs::new(&DgpConfig::new(kind).with_overlap(MAX_OVERLAP));
            let l1 = c.a0.abs() + c.a.iter().map(|v| v.abs()).sum::<f64>();
            assert!(l1 <= MAX_OVERLAP + 1e-12);
            let l1 = c.b0.abs() + c.b.iter().map(|v| v.abs()).sum::<f64>();
            assert!(l1 <= MAX_OVERLAP + 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(DgpConfig::new(DgpKind::CateLinear).with_dims(2, 1, 3).validate().is_err());
        assert!(DgpConfig::new(DgpKind::DteLinear).with_overlap(3.0).validate().is_err());
        assert!(gen_cate(&DgpConfig::new(DgpKind::DteLinear), 5, 0).is_err());
        assert_eq!(DgpKind::parse("cde_binary"), Some(DgpKind::CdeBinary));
        assert_eq!(DgpKind::parse("nope"), None);
    }
}
