//! Doubly robust pseudo-outcomes, scores and cross-fitting fold plans.
//!
//! Every score evaluates propensities through [`clip_propensity`], so inverse weights are
//! bounded by `1 / propensity_clip`.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linmod::{LinearModel, Link};
use crate::nnet::{sigmoid, MlpModel};
use crate::{seed, Error, Result, Scalar};

/// Default lower bound on evaluated propensities.
pub const DEFAULT_PROPENSITY_CLIP: f64 = 0.01;

type SharedFn<F> = Arc<dyn Fn(&[F]) -> F + Send + Sync>;

/// Named closure used to inject known nuisance functions (simulation truths).
#[derive(Clone)]
pub struct OracleFn<F> {
    pub name: String,
    pub f: SharedFn<F>,
}

impl<F> OracleFn<F> {
    pub fn new(name: impl Into<String>, f: impl Fn(&[F]) -> F + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }
}

impl<F> fmt::Debug for OracleFn<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OracleFn({})", self.name)
    }
}

impl<F> Serialize for OracleFn<F> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name)
    }
}

impl<'de, F> Deserialize<'de> for OracleFn<F> {
    fn deserialize<D: Deserializer<'de>>(_: D) -> std::result::Result<Self, D::Error> {
        Err(serde::de::Error::custom("injected functions cannot be deserialized"))
    }
}

/// A fitted (or injected) regression or propensity function, evaluated on the response
/// scale. Serialises as a JSON envelope discriminated by `kind`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "F: Scalar")]
pub enum Predictor<F> {
    /// MLP; with the logistic link the clamped logit is mapped through `e^u/(1+e^u)`.
    Mlp {
        model: MlpModel<F>,
        link: Link,
    },
    Linear {
        model: LinearModel<F>,
    },
    Constant {
        value: F,
    },
    Function {
        function: OracleFn<F>,
    },
    /// Pointwise mean of two predictors.
    Average {
        first: Box<Predictor<F>>,
        second: Box<Predictor<F>>,
    },
}

impl<F: Scalar> Predictor<F> {
    pub fn mlp(model: MlpModel<F>, link: Link) -> Self {
        Predictor::Mlp { model, link }
    }

    pub fn linear(model: LinearModel<F>) -> Self {
        Predictor::Linear { model }
    }

    pub fn constant(value: F) -> Self {
        Predictor::Constant { value }
    }

    pub fn function(name: impl Into<String>, f: impl Fn(&[F]) -> F + Send + Sync + 'static) -> Self {
        Predictor::Function { function: OracleFn::new(name, f) }
    }

    pub fn average(first: Predictor<F>, second: Predictor<F>) -> Self {
        Predictor::Average { first: Box::new(first), second: Box::new(second) }
    }

    pub fn predict(&self, x: &[F]) -> F {
        match self {
            Predictor::Mlp { model, link } => {
                let u = model.predict_unchecked(x);
                match link {
                    Link::Identity => u,
                    Link::Logistic => sigmoid(u),
                }
            }
            Predictor::Linear { model } => model.predict(x),
            Predictor::Constant { value } => *value,
            Predictor::Function { function } => (function.f)(x),
            Predictor::Average { first, second } => (first.predict(x) + second.predict(x)) / F::lit(2.0),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Predictor::Mlp { .. } => "mlp",
            Predictor::Linear { .. } => "linear",
            Predictor::Constant { .. } => "constant",
            Predictor::Function { .. } => "function",
            Predictor::Average { .. } => "average",
        }
    }
}

#[inline]
pub fn clip_propensity<F: Scalar>(p: F, clip: F) -> F {
    p.max(clip).min(F::one() - clip)
}

#[inline]
fn indicator<F: Scalar>(b: bool) -> F {
    if b {
        F::one()
    } else {
        F::zero()
    }
}

/// Observation `(S, T, Y)` for ATE/CATE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct CateObservation<F> {
    pub s: Vec<F>,
    pub t: bool,
    pub y: F,
}

/// Observation `(S₁, T₁, S₂, T₂, Y)` with an optional discrete mediator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct DteObservation<F> {
    pub s1: Vec<F>,
    pub s2: Vec<F>,
    pub t1: bool,
    pub t2: bool,
    pub y: F,
    #[serde(default)]
    pub m: Option<i64>,
}

impl<F: Scalar> DteObservation<F> {
    /// Stage-2 covariate `(s1, s2)`.
    pub fn s_bar(&self) -> Vec<F> {
        let mut v = Vec::with_capacity(self.s1.len() + self.s2.len());
        v.extend_from_slice(&self.s1);
        v.extend_from_slice(&self.s2);
        v
    }
}

/// CATE nuisances: propensity `π̂(s)` and arm-specific outcome regressions `μ̂(t, s)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct CateNuisance<F> {
    pub pi: Predictor<F>,
    pub mu0: Predictor<F>,
    pub mu1: Predictor<F>,
    pub propensity_clip: F,
}

impl<F: Scalar> CateNuisance<F> {
    pub fn new(pi: Predictor<F>, mu0: Predictor<F>, mu1: Predictor<F>) -> Self {
        Self { pi, mu0, mu1, propensity_clip: F::lit(DEFAULT_PROPENSITY_CLIP) }
    }

    pub fn with_clip(mut self, clip: F) -> Self {
        self.propensity_clip = clip;
        self
    }

    pub fn propensity(&self, s: &[F]) -> F {
        clip_propensity(self.pi.predict(s), self.propensity_clip)
    }
}

/// Nuisances of the two-exposure scores: `π̂(s₁)`, `ρ̂(s̄₂)`, `ν̂(s̄₂)` and `μ̂(s₁)`.
///
/// For a controlled direct effect the same slots hold `π̂_t`, `ρ̂_{t,m}`, `ν̂_{t,m}` and
/// `μ̂_{t,m}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct SequentialNuisance<F> {
    pub pi: Predictor<F>,
    pub rho: Predictor<F>,
    pub nu: Predictor<F>,
    pub mu: Predictor<F>,
    pub propensity_clip: F,
}

impl<F: Scalar> SequentialNuisance<F> {
    pub fn new(pi: Predictor<F>, rho: Predictor<F>, nu: Predictor<F>, mu: Predictor<F>) -> Self {
        Self { pi, rho, nu, mu, propensity_clip: F::lit(DEFAULT_PROPENSITY_CLIP) }
    }

    pub fn with_clip(mut self, clip: F) -> Self {
        self.propensity_clip = clip;
        self
    }
}

/// AIPW contrast `μ₁ + t(y - μ₁)/π - μ₀ - (1-t)(y - μ₀)/(1-π)` with `π` used as given.
#[inline]
pub fn aipw_contrast<F: Scalar>(t: bool, y: F, mu1: F, mu0: F, pi: F) -> F {
    let t = indicator::<F>(t);
    mu1 + t * (y - mu1) / pi - mu0 - (F::one() - t) * (y - mu0) / (F::one() - pi)
}

/// Doubly robust CATE pseudo-outcome of one observation.
pub fn cate_pseudo_outcome<F: Scalar>(obs: &CateObservation<F>, nuis: &CateNuisance<F>) -> F {
    aipw_contrast(obs.t, obs.y, nuis.mu1.predict(&obs.s), nuis.mu0.predict(&obs.s), nuis.propensity(&obs.s))
}

/// `ν + b(y - ν)/ρ`, the stage-2 pseudo-outcome for indicator `b`.
#[inline]
pub fn stage2_contrast<F: Scalar>(b: bool, y: F, nu: F, rho: F) -> F {
    nu + indicator::<F>(b) * (y - nu) / rho
}

/// `μ + a(ν - μ)/π + ab(y - ν)/(πρ)`, the sequential score for stage indicators `a`, `b`.
#[inline]
pub fn sequential_contrast<F: Scalar>(a: bool, b: bool, y: F, mu: F, nu: F, pi: F, rho: F) -> F {
    let a = indicator::<F>(a);
    let ab = a * indicator::<F>(b);
    mu + a * (nu - mu) / pi + ab * (y - nu) / (pi * rho)
}

/// Stage-2 pseudo-outcome `ν̂(s̄₂) + t₂(y - ν̂(s̄₂))/ρ̂(s̄₂)` whose `T₁ = 1` conditional
/// mean given `S₁` is the first-exposure outcome model.
pub fn dte_stage2_pseudo_outcome<F: Scalar>(obs: &DteObservation<F>, nuis: &SequentialNuisance<F>) -> F {
    let sb = obs.s_bar();
    let rho = clip_propensity(nuis.rho.predict(&sb), nuis.propensity_clip);
    stage2_contrast(obs.t2, obs.y, nuis.nu.predict(&sb), rho)
}

/// Sequential doubly robust score for the path `(1, 1)`.
pub fn dte_score<F: Scalar>(obs: &DteObservation<F>, nuis: &SequentialNuisance<F>) -> F {
    let sb = obs.s_bar();
    let clip = nuis.propensity_clip;
    sequential_contrast(
        obs.t1,
        obs.t2,
        obs.y,
        nuis.mu.predict(&obs.s1),
        nuis.nu.predict(&sb),
        clip_propensity(nuis.pi.predict(&obs.s1), clip),
        clip_propensity(nuis.rho.predict(&sb), clip),
    )
}

/// Controlled-direct-effect score for `θ_{t,m}`, with indicators `1{T₁ = t}` and
/// `1{T₁ = t, M = m}`. Rows without a mediator never match `m`.
pub fn cde_score<F: Scalar>(obs: &DteObservation<F>, target: (bool, i64), nuis: &SequentialNuisance<F>) -> F {
    let sb = obs.s_bar();
    let clip = nuis.propensity_clip;
    sequential_contrast(
        obs.t1 == target.0,
        obs.m == Some(target.1),
        obs.y,
        nuis.mu.predict(&obs.s1),
        nuis.nu.predict(&sb),
        clip_propensity(nuis.pi.predict(&obs.s1), clip),
        clip_propensity(nuis.rho.predict(&sb), clip),
    )
}

/// First-order (`Δ₁ = Δ₁₁ + … + Δ₁₄`) and second-order (`Δ₂ = Δ₂₁ + Δ₂₂`) parts of the
/// CATE pseudo-outcome error `Ŷ - Y#`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaTerms<F> {
    pub d11: F,
    pub d12: F,
    pub d13: F,
    pub d14: F,
    pub d21: F,
    pub d22: F,
}

impl<F: Scalar> DeltaTerms<F> {
    pub fn delta1(&self) -> F {
        self.d11 + self.d12 + self.d13 + self.d14
    }

    pub fn delta2(&self) -> F {
        self.d21 + self.d22
    }
}

/// Splits `Ŷ - Y#` into terms linear in the nuisance errors (conditionally mean zero given
/// `S`) and terms that are products of a propensity error and an outcome-model error.
///
/// With `e₁ = μ̂(1,s) - μ⁰(1,s)`, `e₀ = μ̂(0,s) - μ⁰(0,s)`, `w₁ = T/π̂ - T/π⁰` and
/// `w₀ = (1-T)/(1-π̂) - (1-T)/(1-π⁰)`:
///
/// ```text
/// Δ₁₁ = (1 - T/π⁰) e₁          Δ₁₂ = w₁ (Y - μ⁰(1,s))
/// Δ₁₃ = -(1 - (1-T)/(1-π⁰)) e₀  Δ₁₄ = -w₀ (Y - μ⁰(0,s))
/// Δ₂₁ = -w₁ e₁                  Δ₂₂ = w₀ e₀
/// ```
///
/// `T·Y = T·Y(1)` and `(1-T)·Y = (1-T)·Y(0)`, so the observed outcome stands in for the
/// potential outcomes.
pub fn delta_terms<F: Scalar>(
    obs: &CateObservation<F>,
    hat: &CateNuisance<F>,
    truth: &CateNuisance<F>,
) -> DeltaTerms<F> {
    let s = &obs.s;
    let t = indicator::<F>(obs.t);
    let one = F::one();
    let (pi_h, pi_0) = (hat.propensity(s), truth.propensity(s));
    let (m1_0, m0_0) = (truth.mu1.predict(s), truth.mu0.predict(s));
    let e1 = hat.mu1.predict(s) - m1_0;
    let e0 = hat.mu0.predict(s) - m0_0;
    let w1 = t / pi_h - t / pi_0;
    let w0 = (one - t) / (one - pi_h) - (one - t) / (one - pi_0);
    DeltaTerms {
        d11: (one - t / pi_0) * e1,
        d12: w1 * (obs.y - m1_0),
        d13: -(one - (one - t) / (one - pi_0)) * e0,
        d14: -w0 * (obs.y - m0_0),
        d21: -w1 * e1,
        d22: w0 * e0,
    }
}

/// `(Δ₁, Δ₂)`; see [`delta_terms`].
pub fn delta_decomposition<F: Scalar>(
    obs: &CateObservation<F>,
    hat: &CateNuisance<F>,
    truth: &CateNuisance<F>,
) -> (F, F) {
    let d = delta_terms(obs, hat, truth);
    (d.delta1(), d.delta2())
}

/// Random partition of `0..n` into `k` folds whose sizes differ by at most one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_total: usize,
    pub k: usize,
    pub seed: u64,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    /// Indices assigned to `fold`, ascending.
    pub fn fold(&self, fold: usize) -> Vec<usize> {
        (0..self.n_total).filter(|&i| self.assignments[i] == fold).collect()
    }

    /// Indices outside `fold`, ascending.
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.n_total).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn make_folds(n: usize, k: usize, seed_: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!("cannot split {n} observations into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed_));
    let mut assignments = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k;
    }
    Ok(FoldPlan { n_total: n, k, seed: seed_, assignments })
}
