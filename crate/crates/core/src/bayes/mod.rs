//! Priors, a static-trajectory HMC sampler with warmup adaptation, and
//! conjugate Dirichlet / multinomial draws.

pub mod dirichlet;
pub mod hmc;
pub mod priors;

pub use dirichlet::{sample_dirichlet_posterior, sample_multinomial, Conjugacy};
pub use hmc::{leapfrog, run_hmc, split_rhat, ChainDiagnostics, HmcConfig, HmcOutput, LogDensity};
pub use priors::PriorSpec;
