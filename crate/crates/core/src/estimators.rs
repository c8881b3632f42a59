//! Cross-fitted estimators: ATE, the two-stage DR-learner for the CATE, the nested doubly
//! robust regression for the first-exposure outcome model, and sequential double machine
//! learning for dynamic treatment effects and controlled direct effects.
//!
//! Nuisances are fitted on their strata through indicator weights: rows with zero weight
//! carry no information for a fit and are dropped before it. All randomness flows from the
//! master seed through [`seed::derive`] keyed by fold, half and role, so results do not
//! depend on how folds are scheduled.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drscores::{
    aipw_contrast, clip_propensity, make_folds, sequential_contrast, stage2_contrast, CateNuisance, CateObservation,
    DteObservation, FoldPlan, Predictor, DEFAULT_PROPENSITY_CLIP,
};
use crate::linmod::{self, Design, Link};
use crate::nnet::{mlp_fit, Loss, MlpConfig, MlpModel, WeightedSample};
use crate::{seed, stats, Error, Result};

/// Default number of cross-fitting folds.
pub const DEFAULT_FOLDS: usize = 5;
/// Default λ-grid length for Lasso learners.
pub const DEFAULT_GRID_SIZE: usize = 20;

/// How one nuisance (or a final regression) is learned.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Learner {
    /// Clamped MLP; its `seed` is replaced by a role-specific derived seed.
    Mlp { config: MlpConfig<f64> },
    /// ℓ1-penalised linear or logistic regression with λ chosen on a held-out split.
    Lasso { grid_size: usize },
    /// Weighted mean of the targets, ignoring covariates.
    Constant,
    /// A predictor supplied by the caller and used as is.
    Fixed { predictor: Predictor<f64> },
}

impl Learner {
    pub fn lasso() -> Self {
        Learner::Lasso { grid_size: DEFAULT_GRID_SIZE }
    }

    pub fn mlp(config: MlpConfig<f64>) -> Self {
        Learner::Mlp { config }
    }

    pub fn fixed(predictor: Predictor<f64>) -> Self {
        Learner::Fixed { predictor }
    }
}

/// Learner assignment per nuisance role. CATE and ATE use `pi` and `mu`, the latter for
/// both arms unless `mu0`/`mu1` override it; the sequential estimators use `pi`, `rho`,
/// `nu`, and `mu` as the final regression of the nested stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub pi: Learner,
    pub mu: Learner,
    pub rho: Learner,
    pub nu: Learner,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0: Option<Learner>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu1: Option<Learner>,
    pub propensity_clip: f64,
}

impl LearnerSpec {
    pub fn uniform(learner: Learner) -> Self {
        Self {
            pi: learner.clone(),
            mu: learner.clone(),
            rho: learner.clone(),
            nu: learner,
            mu0: None,
            mu1: None,
            propensity_clip: DEFAULT_PROPENSITY_CLIP,
        }
    }

    pub fn lasso() -> Self {
        Self::uniform(Learner::lasso())
    }

    pub fn with_pi(mut self, l: Learner) -> Self {
        self.pi = l;
        self
    }

    pub fn with_mu(mut self, l: Learner) -> Self {
        self.mu = l;
        self
    }

    pub fn with_rho(mut self, l: Learner) -> Self {
        self.rho = l;
        self
    }

    pub fn with_nu(mut self, l: Learner) -> Self {
        self.nu = l;
        self
    }

    /// Separate learners for the control and treated outcome regressions.
    pub fn with_arm_mu(mut self, mu0: Learner, mu1: Learner) -> Self {
        self.mu0 = Some(mu0);
        self.mu1 = Some(mu1);
        self
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.propensity_clip = clip;
        self
    }

    fn arm_mu(&self, treated: bool) -> &Learner {
        let over = if treated { &self.mu1 } else { &self.mu0 };
        over.as_ref().unwrap_or(&self.mu)
    }

    fn validate(&self) -> Result<()> {
        let c = self.propensity_clip;
        if !(0.0..0.5).contains(&c) {
            return Err(Error::Config(format!("propensity_clip must lie in [0, 0.5), got {c}")));
        }
        for l in [&self.pi, &self.mu, &self.rho, &self.nu].into_iter().chain(self.mu0.iter()).chain(self.mu1.iter()) {
            match l {
                Learner::Mlp { config } => config.validate()?,
                Learner::Lasso { grid_size } if *grid_size < 2 => {
                    return Err(Error::Config("lasso grid_size must be at least 2".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self::lasso()
    }
}

/// Point estimate, standard deviation of the score and normal confidence interval.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: String,
    pub theta_hat: f64,
    pub sigma_hat: f64,
    pub ci: [f64; 2],
    pub alpha: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    /// Held-out score mean of each fold.
    pub per_fold: Vec<f64>,
    pub learner_configs: LearnerSpec,
    /// Held-out scores, by observation index.
    #[serde(skip)]
    pub scores: Vec<f64>,
}

impl EstimateReport {
    pub fn ci_lower(&self) -> f64 {
        self.ci[0]
    }

    pub fn ci_upper(&self) -> f64 {
        self.ci[1]
    }

    pub fn covers(&self, theta: f64) -> bool {
        self.ci[0] <= theta && theta <= self.ci[1]
    }

    pub fn ci_width(&self) -> f64 {
        self.ci[1] - self.ci[0]
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Assembles a report from per-observation scores. `theta_hat` is either the grand mean or
/// the mean of fold means.
fn report(
    estimand: String,
    plan: &FoldPlan,
    scores: Vec<f64>,
    fold_mean_average: bool,
    alpha: f64,
    seed_: u64,
    spec: &LearnerSpec,
) -> EstimateReport {
    let n = scores.len();
    let per_fold: Vec<f64> =
        (0..plan.k).map(|k| stats::mean(&plan.fold(k).iter().map(|&i| scores[i]).collect::<Vec<_>>())).collect();
    let theta_hat = if fold_mean_average { stats::mean(&per_fold) } else { stats::mean(&scores) };
    let sigma_hat = (scores.iter().map(|s| (s - theta_hat).powi(2)).sum::<f64>() / n as f64).sqrt();
    let half = stats::two_sided_z(alpha) * sigma_hat / (n as f64).sqrt();
    EstimateReport {
        estimand,
        theta_hat,
        sigma_hat,
        ci: [theta_hat - half, theta_hat + half],
        alpha,
        k: plan.k,
        n,
        seed: seed_,
        per_fold,
        learner_configs: spec.clone(),
        scores,
    }
}

/// One regression problem: covariate rows, per-row targets and weights over `idx`.
struct Task<'a> {
    role: &'static str,
    x: &'a [Vec<f64>],
    idx: &'a [usize],
    link: Link,
}

/// Fits `learner` to the rows of `task` with positive weight.
fn fit_role(
    learner: &Learner,
    task: Task<'_>,
    target: impl Fn(usize) -> f64,
    weight: impl Fn(usize) -> f64,
    seed_: u64,
) -> Result<Predictor<f64>> {
    let kept: Vec<usize> = task.idx.iter().copied().filter(|&i| weight(i) > 0.0).collect();
    let role = task.role;
    if kept.is_empty() {
        return Err(Error::EmptySubgroup(format!("{role}: no rows with positive weight")));
    }
    let y: Vec<f64> = kept.iter().map(|&i| target(i)).collect();
    let w: Vec<f64> = kept.iter().map(|&i| weight(i)).collect();
    if task.link == Link::Logistic && y.iter().all(|&v| v == y[0]) {
        return Err(Error::Separation(format!("{role}: every label equals {}", y[0])));
    }
    let seed_ = seed::derive(seed_, &[seed::tag(role)]);
    match learner {
        Learner::Fixed { predictor } => Ok(predictor.clone()),
        Learner::Constant => {
            let total: f64 = w.iter().sum();
            Ok(Predictor::constant(y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / total))
        }
        Learner::Lasso { grid_size } => {
            let rows: Vec<&[f64]> = kept.iter().map(|&i| task.x[i].as_slice()).collect();
            let design = Design::from_rows(&rows)?;
            let lambda = linmod::select_lambda(&design, &y, &w, task.link, *grid_size, seed_)?;
            Ok(Predictor::linear(linmod::fit(&design, &y, &w, lambda, task.link)?))
        }
        Learner::Mlp { config } => {
            let loss = match task.link {
                Link::Identity => Loss::Square,
                Link::Logistic => Loss::Logistic,
            };
            let cfg = config.clone().with_loss(loss).with_seed(seed_);
            let samples: Vec<WeightedSample<f64>> = kept
                .iter()
                .zip(y.iter().zip(&w))
                .map(|(&i, (&t, &wt))| WeightedSample::new(task.x[i].clone(), t, wt))
                .collect();
            Ok(Predictor::mlp(mlp_fit(&samples, &cfg)?, task.link))
        }
    }
}

fn unit(_: usize) -> f64 {
    1.0
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Ascending sample split into two halves whose sizes differ by at most one.
fn two_way_split(idx: &[usize], seed_: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = idx.to_vec();
    order.shuffle(&mut seed::rng(seed_));
    let mut b = order.split_off(order.len() / 2);
    let mut a = order;
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

fn check_dims<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Result<usize> {
    let mut dim = None;
    for (i, r) in rows.enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("row {i} has a non-finite covariate")));
        }
        match dim {
            None => dim = Some(r.len()),
            Some(d) if d != r.len() => {
                return Err(Error::Input(format!("row {i} has {} covariates, expected {d}", r.len())))
            }
            _ => {}
        }
    }
    match dim {
        Some(0) => Err(Error::Input("observations have no covariates".into())),
        Some(d) => Ok(d),
        None => Err(Error::Input("no observations".into())),
    }
}

fn check_cate_data(data: &[CateObservation<f64>]) -> Result<()> {
    check_dims(data.iter().map(|o| o.s.as_slice()))?;
    if let Some(i) = data.iter().position(|o| !o.y.is_finite()) {
        return Err(Error::Input(format!("row {i} has a non-finite outcome")));
    }
    Ok(())
}

/// Fits `(π̂, μ̂₀, μ̂₁)` on the rows `train`.
fn fit_cate_nuisance(
    data: &[CateObservation<f64>],
    x: &[Vec<f64>],
    train: &[usize],
    spec: &LearnerSpec,
    seed_: u64,
) -> Result<CateNuisance<f64>> {
    let task = |role, link| Task { role, x, idx: train, link };
    let pi = fit_role(&spec.pi, task("pi", Link::Logistic), |i| ind(data[i].t), unit, seed_)?;
    let y = |i: usize| data[i].y;
    let mu0 = fit_role(spec.arm_mu(false), task("mu0", Link::Identity), y, |i| ind(!data[i].t), seed_)?;
    let mu1 = fit_role(spec.arm_mu(true), task("mu1", Link::Identity), y, |i| ind(data[i].t), seed_)?;
    Ok(CateNuisance::new(pi, mu0, mu1).with_clip(spec.propensity_clip))
}

fn both_arms(data: &[CateObservation<f64>], idx: &[usize]) -> bool {
    idx.iter().any(|&i| data[i].t) && idx.iter().any(|&i| !data[i].t)
}

/// Cross-fitted AIPW estimate of `E{Y(1) - Y(0)}`.
pub fn estimate_ate(
    data: &[CateObservation<f64>],
    spec: &LearnerSpec,
    k: usize,
    alpha: f64,
    seed_: u64,
) -> Result<EstimateReport> {
    check_alpha(alpha)?;
    spec.validate()?;
    check_cate_data(data)?;
    let plan = make_folds(data.len(), k, seed_)?;
    let x: Vec<Vec<f64>> = data.iter().map(|o| o.s.clone()).collect();
    let fold_scores: Vec<Vec<(usize, f64)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (train, eval) = (plan.complement(fold), plan.fold(fold));
            if !both_arms(data, &train) {
                return Err(Error::Fold { fold, message: "training folds contain a single treatment arm".into() });
            }
            let fseed = seed::derive(seed_, &[seed::tag("fold"), fold as u64]);
            let nuis = fit_cate_nuisance(data, &x, &train, spec, fseed)
                .map_err(|e| Error::Fold { fold, message: e.to_string() })?;
            Ok(eval
                .iter()
                .map(|&i| {
                    let o = &data[i];
                    let pi = nuis.propensity(&o.s);
                    (i, aipw_contrast(o.t, o.y, nuis.mu1.predict(&o.s), nuis.mu0.predict(&o.s), pi))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let scores = scatter(data.len(), fold_scores);
    Ok(report("ate".into(), &plan, scores, false, alpha, seed_, spec))
}

fn scatter(n: usize, parts: Vec<Vec<(usize, f64)>>) -> Vec<f64> {
    let mut out = vec![f64::NAN; n];
    for (i, v) in parts.into_iter().flatten() {
        out[i] = v;
    }
    out
}

/// Nuisances fitted on one half, with the pseudo-outcomes they produced on the other.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CateHalf {
    /// Indices whose pseudo-outcomes trained the final model.
    pub evaluation: Vec<usize>,
    pub seed: u64,
    pub nuisance: CateNuisance<f64>,
    pub model: MlpModel<f64>,
}

/// Averaged DR-learner: `(θ̂¹ + θ̂²) / 2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CateEstimate {
    pub model_half1: MlpModel<f64>,
    pub model_half2: MlpModel<f64>,
    pub split_seed: u64,
    pub halves: [CateHalf; 2],
}

impl CateEstimate {
    pub fn predict(&self, s: &[f64]) -> f64 {
        (self.model_half1.predict_unchecked(s) + self.model_half2.predict_unchecked(s)) / 2.0
    }
}

/// Split seeded by `seed`, retried once with `seed + 1` when a half lacks an arm.
fn cate_split(data: &[CateObservation<f64>], seed_: u64) -> Result<(Vec<usize>, Vec<usize>, u64)> {
    let all: Vec<usize> = (0..data.len()).collect();
    for s in [seed_, seed_.wrapping_add(1)] {
        let (a, b) = two_way_split(&all, s);
        if both_arms(data, &a) && both_arms(data, &b) {
            return Ok((a, b, s));
        }
    }
    Err(Error::Split("a half contains a single treatment arm after reshuffling".into()))
}

/// Two-stage DR-learner with a two-way split and swap.
pub fn estimate_cate(
    data: &[CateObservation<f64>],
    spec: &LearnerSpec,
    final_stage: &MlpConfig<f64>,
    seed_: u64,
) -> Result<CateEstimate> {
    if data.len() < 4 {
        return Err(Error::Config(format!("need at least 4 observations, got {}", data.len())));
    }
    let (a, b, split_seed) = cate_split(data, seed_)?;
    let mut est = cate_from_halves(data, &a, &b, spec, final_stage, seed_)?;
    est.split_seed = split_seed;
    Ok(est)
}

/// DR-learner for a given split: `θ̂¹` regresses pseudo-outcomes on `first` built from
/// nuisances fitted on `second`, and `θ̂²` the reverse. Each direction's seed depends only on
/// its evaluation set, so exchanging `first` and `second` yields the same averaged predictor.
pub fn cate_from_halves(
    data: &[CateObservation<f64>],
    first: &[usize],
    second: &[usize],
    spec: &LearnerSpec,
    final_stage: &MlpConfig<f64>,
    seed_: u64,
) -> Result<CateEstimate> {
    spec.validate()?;
    final_stage.validate()?;
    check_cate_data(data)?;
    for h in [first, second] {
        if !both_arms(data, h) {
            return Err(Error::Split("a half contains a single treatment arm".into()));
        }
    }
    let x: Vec<Vec<f64>> = data.iter().map(|o| o.s.clone()).collect();
    let direction = |eval: &[usize], train: &[usize]| -> Result<CateHalf> {
        debug_assert!(eval.iter().all(|i| !train.contains(i)));
        let mut key: Vec<u64> = eval.iter().map(|&i| i as u64).collect();
        key.sort_unstable();
        let dseed = seed::derive(seed_, &key);
        let nuisance = fit_cate_nuisance(data, &x, train, spec, dseed)?;
        let samples: Vec<WeightedSample<f64>> = eval
            .iter()
            .map(|&i| {
                let o = &data[i];
                let target = aipw_contrast(
                    o.t,
                    o.y,
                    nuisance.mu1.predict(&o.s),
                    nuisance.mu0.predict(&o.s),
                    nuisance.propensity(&o.s),
                );
                WeightedSample::unit(o.s.clone(), target)
            })
            .collect();
        let cfg = final_stage.clone().with_seed(seed::derive(dseed, &[seed::tag("final")]));
        let model = mlp_fit(&samples, &cfg)?;
        Ok(CateHalf { evaluation: eval.to_vec(), seed: dseed, nuisance, model })
    };
    let (h1, h2) = rayon::join(|| direction(first, second), || direction(second, first));
    let (h1, h2) = (h1?, h2?);
    Ok(CateEstimate {
        model_half1: h1.model.clone(),
        model_half2: h2.model.clone(),
        split_seed: seed_,
        halves: [h1, h2],
    })
}

/// Plug-in contrast `μ̂(1,s) - μ̂(0,s)` from arm-wise regressions on the full sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PluginCate {
    pub mu0: Predictor<f64>,
    pub mu1: Predictor<f64>,
}

impl PluginCate {
    pub fn predict(&self, s: &[f64]) -> f64 {
        self.mu1.predict(s) - self.mu0.predict(s)
    }
}

pub fn estimate_plugin_cate(data: &[CateObservation<f64>], spec: &LearnerSpec, seed_: u64) -> Result<PluginCate> {
    spec.validate()?;
    check_cate_data(data)?;
    let x: Vec<Vec<f64>> = data.iter().map(|o| o.s.clone()).collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    let task = |role| Task { role, x: &x, idx: &idx, link: Link::Identity };
    let y = |i: usize| data[i].y;
    Ok(PluginCate {
        mu0: fit_role(spec.arm_mu(false), task("mu0"), y, |i| ind(!data[i].t), seed_)?,
        mu1: fit_role(spec.arm_mu(true), task("mu1"), y, |i| ind(data[i].t), seed_)?,
    })
}

/// Stage indicators of a two-exposure target: `a` selects the first-stage stratum and `b`
/// the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Path {
    /// `a = T₁`, `b = T₂`.
    Dte,
    /// `a = 1{T₁ = t}`, `b = 1{M = m}`.
    Cde { t: bool, m: i64 },
}

impl Path {
    fn a(self, o: &DteObservation<f64>) -> bool {
        match self {
            Path::Dte => o.t1,
            Path::Cde { t, .. } => o.t1 == t,
        }
    }

    fn b(self, o: &DteObservation<f64>) -> bool {
        match self {
            Path::Dte => o.t2,
            Path::Cde { m, .. } => o.m == Some(m),
        }
    }

    fn label(self) -> String {
        match self {
            Path::Dte => "dte".into(),
            Path::Cde { t, m } => format!("cde(t={},m={m})", t as u8),
        }
    }
}

struct SeqData<'a> {
    obs: &'a [DteObservation<f64>],
    s1: Vec<Vec<f64>>,
    sbar: Vec<Vec<f64>>,
    path: Path,
}

impl<'a> SeqData<'a> {
    fn new(obs: &'a [DteObservation<f64>], path: Path) -> Result<Self> {
        check_dims(obs.iter().map(|o| o.s1.as_slice()))?;
        let sbar: Vec<Vec<f64>> = obs.iter().map(|o| o.s_bar()).collect();
        check_dims(sbar.iter().map(|r| r.as_slice()))?;
        if let Some(i) = obs.iter().position(|o| !o.y.is_finite()) {
            return Err(Error::Input(format!("row {i} has a non-finite outcome")));
        }
        Ok(Self { obs, s1: obs.iter().map(|o| o.s1.clone()).collect(), sbar, path })
    }

    fn a(&self, i: usize) -> f64 {
        ind(self.path.a(&self.obs[i]))
    }

    fn ab(&self, i: usize) -> f64 {
        ind(self.path.a(&self.obs[i]) && self.path.b(&self.obs[i]))
    }

    fn b(&self, i: usize) -> f64 {
        ind(self.path.b(&self.obs[i]))
    }

    /// `ρ̂` and `ν̂` fitted on the stratum rows of `train`.
    fn fit_stage2(&self, spec: &LearnerSpec, train: &[usize], seed_: u64) -> Result<(Predictor<f64>, Predictor<f64>)> {
        let rho = fit_role(
            &spec.rho,
            Task { role: "rho", x: &self.sbar, idx: train, link: Link::Logistic },
            |i| self.b(i),
            |i| self.a(i),
            seed_,
        )
        .map_err(stratum)?;
        let nu = fit_role(
            &spec.nu,
            Task { role: "nu", x: &self.sbar, idx: train, link: Link::Identity },
            |i| self.obs[i].y,
            |i| self.ab(i),
            seed_,
        )
        .map_err(stratum)?;
        Ok((rho, nu))
    }

    /// Nested doubly robust regression of the stage-2 pseudo-outcome on `S₁` over `rows`,
    /// weighted by the first-stage indicator and averaged over a swapped two-way split.
    fn mu_dr(&self, spec: &LearnerSpec, final_stage: &Learner, rows: &[usize], seed_: u64) -> Result<Predictor<f64>> {
        if let Learner::Fixed { predictor } = final_stage {
            return Ok(predictor.clone());
        }
        let usable =
            |h: &[usize]| h.iter().any(|&i| self.ab(i) > 0.0) && h.iter().any(|&i| self.a(i) > 0.0 && self.b(i) == 0.0);
        let mut split = None;
        for s in [seed_, seed_.wrapping_add(1)] {
            let (h1, h2) = two_way_split(rows, s);
            if usable(&h1) && usable(&h2) {
                split = Some((h1, h2));
                break;
            }
        }
        let (h1, h2) = split
            .ok_or_else(|| Error::Stratum("a half lacks first-stage rows with both second-stage outcomes".into()))?;
        let clip = spec.propensity_clip;
        let direction = |eval: &[usize], train: &[usize]| -> Result<Predictor<f64>> {
            let mut key: Vec<u64> = eval.iter().map(|&i| i as u64).collect();
            key.sort_unstable();
            let dseed = seed::derive(seed_, &key);
            let (rho, nu) = self.fit_stage2(spec, train, dseed)?;
            let pseudo: Vec<f64> = (0..self.obs.len())
                .map(|i| {
                    if eval.binary_search(&i).is_ok() && self.a(i) > 0.0 {
                        let sb = &self.sbar[i];
                        stage2_contrast(
                            self.path.b(&self.obs[i]),
                            self.obs[i].y,
                            nu.predict(sb),
                            clip_propensity(rho.predict(sb), clip),
                        )
                    } else {
                        0.0
                    }
                })
                .collect();
            fit_role(
                final_stage,
                Task { role: "mu", x: &self.s1, idx: eval, link: Link::Identity },
                |i| pseudo[i],
                |i| self.a(i),
                dseed,
            )
            .map_err(stratum)
        };
        let (m1, m2) = rayon::join(|| direction(&h1, &h2), || direction(&h2, &h1));
        Ok(Predictor::average(m1?, m2?))
    }
}

fn stratum(e: Error) -> Error {
    match e {
        Error::EmptySubgroup(m) | Error::Separation(m) => Error::Stratum(m),
        other => other,
    }
}

/// Nested doubly robust estimator of `μ⁰(s₁) = E{Y(1,1) | S₁ = s₁, T₁ = 1}` with an MLP
/// final stage. Returns the half-averaged predictor.
pub fn estimate_mu_dr(
    data: &[DteObservation<f64>],
    spec: &LearnerSpec,
    final_stage: &MlpConfig<f64>,
    seed_: u64,
) -> Result<Predictor<f64>> {
    estimate_mu_dr_with(data, spec, &Learner::mlp(final_stage.clone()), seed_)
}

/// [`estimate_mu_dr`] with an arbitrary final-stage learner.
pub fn estimate_mu_dr_with(
    data: &[DteObservation<f64>],
    spec: &LearnerSpec,
    final_stage: &Learner,
    seed_: u64,
) -> Result<Predictor<f64>> {
    spec.validate()?;
    let sd = SeqData::new(data, Path::Dte)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    if !rows.iter().any(|&i| sd.a(i) > 0.0) {
        return Err(Error::Stratum("no rows with t1 = 1".into()));
    }
    sd.mu_dr(spec, final_stage, &rows, seed_)
}

fn sequential(
    data: &[DteObservation<f64>],
    path: Path,
    spec: &LearnerSpec,
    k: usize,
    alpha: f64,
    seed_: u64,
) -> Result<EstimateReport> {
    check_alpha(alpha)?;
    spec.validate()?;
    let plan = make_folds(data.len(), k, seed_)?;
    let sd = SeqData::new(data, path)?;
    let clip = spec.propensity_clip;
    let fold_scores: Vec<Vec<(usize, f64)>> = (0..k)
        .into_par_iter()
        .map(|fold| -> Result<Vec<(usize, f64)>> {
            let (train, eval) = (plan.complement(fold), plan.fold(fold));
            let fseed = seed::derive(seed_, &[seed::tag("fold"), fold as u64]);
            let in_fold = |e: Error| match e {
                Error::Stratum(m) => Error::Stratum(format!("fold {fold}: {m}")),
                other => other,
            };
            let pi = fit_role(
                &spec.pi,
                Task { role: "pi", x: &sd.s1, idx: &train, link: Link::Logistic },
                |i| sd.a(i),
                unit,
                fseed,
            )
            .map_err(stratum)
            .map_err(in_fold)?;
            let (rho, nu) = sd.fit_stage2(spec, &train, fseed).map_err(in_fold)?;
            let mu = sd.mu_dr(spec, &spec.mu, &train, seed::derive(fseed, &[seed::tag("nested")])).map_err(in_fold)?;
            Ok(eval
                .iter()
                .map(|&i| {
                    let o = &data[i];
                    let sb = &sd.sbar[i];
                    let psi = sequential_contrast(
                        path.a(o),
                        path.b(o),
                        o.y,
                        mu.predict(&o.s1),
                        nu.predict(sb),
                        clip_propensity(pi.predict(&o.s1), clip),
                        clip_propensity(rho.predict(sb), clip),
                    );
                    (i, psi)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let scores = scatter(data.len(), fold_scores);
    Ok(report(path.label(), &plan, scores, true, alpha, seed_, spec))
}

/// Sequential double machine learning estimate of `θ = E{Y(1,1)}`.
pub fn estimate_dte(
    data: &[DteObservation<f64>],
    spec: &LearnerSpec,
    k: usize,
    alpha: f64,
    seed_: u64,
) -> Result<EstimateReport> {
    sequential(data, Path::Dte, spec, k, alpha, seed_)
}

/// Estimate of `θ_{t,m} = E{Y(t,m)}` for a discrete mediator held at `m`.
pub fn estimate_cde(
    data: &[DteObservation<f64>],
    target: (bool, i64),
    spec: &LearnerSpec,
    k: usize,
    alpha: f64,
    seed_: u64,
) -> Result<EstimateReport> {
    sequential(data, Path::Cde { t: target.0, m: target.1 }, spec, k, alpha, seed_)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(v: f64) -> Learner {
        Learner::fixed(Predictor::constant(v))
    }

    fn ate_data(n: usize) -> Vec<CateObservation<f64>> {
        (0..n)
            .map(|i| {
                let t = i % 2 == 0;
                CateObservation { s: vec![(i as f64 / n as f64) - 0.5], t, y: ind(t) }
            })
            .collect()
    }

    #[test]
    fn ate_oracle_shortcut() {
        let spec = LearnerSpec::uniform(fixed(0.5)).with_arm_mu(fixed(0.0), fixed(1.0));
        let r = estimate_ate(&ate_data(40), &spec, 5, 0.05, 3).unwrap();
        assert_eq!(r.theta_hat, 1.0);
        assert_eq!(r.sigma_hat, 0.0);
        assert_eq!(r.ci, [1.0, 1.0]);
        assert_eq!(r.per_fold, vec![1.0; 5]);
    }

    #[test]
    fn ate_single_arm_fold_is_named() {
        let data: Vec<_> = ate_data(40).into_iter().filter(|o| !o.t).collect();
        let err = estimate_ate(&data, &LearnerSpec::lasso(), 2, 0.05, 0).unwrap_err();
        assert!(matches!(err, Error::Fold { fold: 0, .. }), "{err}");
    }

    #[test]
    fn report_arithmetic() {
        let plan = make_folds(6, 2, 0).unwrap();
        let scores = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = report("x".into(), &plan, scores, false, 0.05, 0, &LearnerSpec::lasso());
        assert_eq!(r.theta_hat, 3.5);
        let sigma = (17.5f64 / 6.0).sqrt();
        assert!((r.sigma_hat - sigma).abs() < 1e-12);
        assert!((r.ci_width() - 2.0 * 1.959964 * sigma / 6f64.sqrt()).abs() < 1e-6);
        assert!((r.ci[0] - (3.5 - stats::two_sided_z(0.05) * sigma / 6f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn split_halves_balanced_and_disjoint() {
        let idx: Vec<usize> = (0..11).collect();
        let (a, b) = two_way_split(&idx, 3);
        assert_eq!((a.len(), b.len()), (5, 6));
        assert!(a.iter().all(|i| !b.contains(i)));
    }

    #[test]
    fn fit_role_rejects_empty_and_single_class() {
        let x = vec![vec![0.0], vec![1.0]];
        let idx = [0, 1];
        let t = || Task { role: "pi", x: &x, idx: &idx, link: Link::Logistic };
        assert!(matches!(fit_role(&Learner::Constant, t(), |_| 1.0, unit, 0), Err(Error::Separation(_))));
        assert!(matches!(fit_role(&Learner::Constant, t(), |i| i as f64, |_| 0.0, 0), Err(Error::EmptySubgroup(_))));
        let p = fit_role(&Learner::Constant, t(), |i| i as f64, |i| 1.0 + i as f64, 0).unwrap();
        assert!((p.predict(&[0.0]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
