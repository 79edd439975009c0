//! Doubly robust Bayesian estimation of finite-population means from a
//! non-probability sample pooled with a reference probability survey.
//!
//! The main estimator (GPPP) fits, in a single posterior:
//!
//! 1. a weight model `w_R ~ Normal(exp(x'γ), λ²)` on the reference survey,
//! 2. a membership model `δ_A ~ Bernoulli(logit⁻¹(x'φ))` on the pooled sample,
//! 3. a partially linear outcome model whose nonlinear part is a reduced-rank
//!    Gaussian process over the log pseudo-inclusion probability
//!    `u = x'(φ − γ)`.
//!
//! Posterior predictive outcomes for reference units are then expanded to the
//! population through a finite-population Bayesian bootstrap over the
//! post-strata implied by the reference weights.
//!
//! The crate also contains the comparators (LWP, AIPW, PAPP), the two
//! simulation designs and the replication harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bayes;
pub mod data;
pub mod error;
pub mod estimators;
pub mod formula;
pub mod fpbb;
pub mod glm;
pub mod gp;
pub mod joint;
pub mod linalg;
pub mod papp;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
