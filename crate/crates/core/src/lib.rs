//! Doubly robust nested neural-network estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`nnet`]: a from-scratch ReLU multilayer perceptron with a clamped scalar output,
//!   weighted square/logistic losses and deterministic mini-batch training.
//! - [`linmod`]: ℓ1-penalised linear (coordinate descent) and logistic (proximal gradient)
//!   regression used as first-stage nuisance learners.
//! - [`drscores`]: doubly robust pseudo-outcomes and scores, cross-fitting fold plans and the
//!   first/second-order error decomposition of the CATE pseudo-outcome.
//! - [`estimators`]: cross-fitted ATE, the two-stage DR-learner for the CATE, the nested
//!   doubly robust regression for the first-exposure outcome model, and the sequential
//!   double machine learning estimator for dynamic treatment effects and controlled direct
//!   effects.
//! - [`simlab`]: synthetic data-generating processes with exact nuisance truths, and the
//!   Monte Carlo studies (orthogonality, coverage, double robustness, rate slopes).
//!
//! The numerical kernels (`nnet`, `linmod`, `drscores`) are generic over a [`Scalar`]
//! (`f32` or `f64`). Estimators and studies run in `f64`; the aliases below name the
//! concrete types they use.

// Validation uses `!(x >= 0)` so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod drscores;
pub mod error;
pub mod estimators;
pub mod linmod;
pub mod nnet;
mod scalar;
pub mod seed;
pub mod simlab;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision multilayer perceptron.
pub type Mlp = nnet::MlpModel<f64>;
/// Single-precision multilayer perceptron.
pub type Mlp32 = nnet::MlpModel<f32>;
/// Double-precision MLP configuration.
pub type MlpConfig = nnet::MlpConfig<f64>;
/// Double-precision ℓ1-fitted linear/logistic model.
pub type LinearModel = linmod::LinearModel<f64>;
/// Double-precision nuisance predictor envelope.
pub type Predictor = drscores::Predictor<f64>;
/// Double-precision CATE nuisance bundle.
pub type CateNuisance = drscores::CateNuisance<f64>;
/// Double-precision two-exposure nuisance bundle.
pub type SequentialNuisance = drscores::SequentialNuisance<f64>;
/// Double-precision ATE/CATE observation.
pub type CateObservation = drscores::CateObservation<f64>;
/// Double-precision two-exposure observation.
pub type DteObservation = drscores::DteObservation<f64>;
