//! Finite-population Bayesian bootstrap over reference-weight post-strata.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::dirichlet::{sample_dirichlet_posterior, sample_multinomial, Conjugacy};
use crate::data::PostStrata;
use crate::rng::rng_for;
use crate::{Error, Result};

const POLYA_STREAM: u64 = 0x706f_6c79;
/// Upper clamp on stratum inclusion probabilities when `N > n_R`.
pub const PI_CEILING: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyaPosterior {
    /// `M × J` population stratum sizes `N_j = n_j + r_j`.
    pub n_draws: Vec<Vec<u64>>,
    /// `M × J` Dirichlet draws of the sampled stratum shares.
    pub xi_draws: Vec<Vec<f64>>,
    pub population_size: u64,
}

impl PolyaPosterior {
    pub fn len(&self) -> usize {
        self.n_draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_draws.is_empty()
    }
}

/// Normalized non-sampled shares `ξ_j (1 − π_j)/π_j`.
pub fn nonsampled_shares(xi: &[f64], pi: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = xi.iter().zip(pi).map(|(x, p)| x * (1.0 - p) / p).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// `M` Pólya-posterior draws. Draw `m` uses its own RNG stream.
pub fn draw_polya(
    strata: &PostStrata,
    population_size: usize,
    draws: usize,
    alpha: &[f64],
    conjugacy: Conjugacy,
    seed: u64,
) -> Result<PolyaPosterior> {
    let counts = strata.counts();
    let n_r: usize = counts.iter().sum();
    if strata.is_empty() || n_r == 0 {
        return Err(Error::Validation("no reference strata".into()));
    }
    if alpha.len() != counts.len() {
        return Err(Error::Dimension(format!(
            "{} prior concentrations for {} strata",
            alpha.len(),
            counts.len()
        )));
    }
    if population_size < n_r {
        return Err(Error::Validation(format!(
            "population size {population_size} is below the reference sample size {n_r}"
        )));
    }
    let pis = strata.pis();
    if let Some(p) = pis.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::Validation(format!(
            "stratum probability {p} outside (0, 1]"
        )));
    }
    let residual = (population_size - n_r) as u64;
    if residual > 0 && pis.iter().all(|p| *p >= 1.0) {
        return Err(Error::Validation(
            "every stratum has inclusion probability 1 but the population exceeds the reference sample".into(),
        ));
    }
    let pis: Vec<f64> = pis.iter().map(|p| p.min(PI_CEILING)).collect();
    conjugacy.parameters(&counts, alpha)?;

    let out: Vec<Result<(Vec<u64>, Vec<f64>)>> = (0..draws)
        .into_par_iter()
        .map(|m| {
            let mut rng = rng_for(seed, &[POLYA_STREAM, m as u64]);
            let xi = sample_dirichlet_posterior(&counts, alpha, conjugacy, &mut rng)?;
            let r = if residual == 0 {
                vec![0; counts.len()]
            } else {
                sample_multinomial(residual, &nonsampled_shares(&xi, &pis), &mut rng)?
            };
            let n = counts.iter().zip(&r).map(|(&c, &r)| c as u64 + r).collect();
            Ok((n, xi))
        })
        .collect();
    let mut n_draws = Vec::with_capacity(draws);
    let mut xi_draws = Vec::with_capacity(draws);
    for r in out {
        let (n, xi) = r?;
        n_draws.push(n);
        xi_draws.push(xi);
    }
    Ok(PolyaPosterior {
        n_draws,
        xi_draws,
        population_size: population_size as u64,
    })
}

/// Expanded totals `Σ_j (N_j/n_j) Σ_{i∈j} ŷ_i` for each draw; `y_rep_r`
/// is `M × n_R` in reference-sample order.
pub fn expand_predictions(
    polya: &PolyaPosterior,
    strata: &PostStrata,
    y_rep_r: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if y_rep_r.len() != polya.len() {
        return Err(Error::Dimension(format!(
            "{} prediction draws for {} Pólya draws",
            y_rep_r.len(),
            polya.len()
        )));
    }
    let counts = strata.counts();
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Validation(format!(
            "stratum {j} has no reference units"
        )));
    }
    let n_r = strata.stratum_of.len();
    if strata.stratum_of.iter().any(|&j| j >= counts.len()) {
        return Err(Error::Validation(
            "unit mapped to an unknown stratum".into(),
        ));
    }
    y_rep_r
        .iter()
        .zip(&polya.n_draws)
        .map(|(y, n)| {
            if y.len() != n_r {
                return Err(Error::Dimension(format!(
                    "{} predictions for {n_r} reference units",
                    y.len()
                )));
            }
            let mut sums = vec![0.0; counts.len()];
            for (v, &j) in y.iter().zip(&strata.stratum_of) {
                sums[j] += v;
            }
            Ok(sums
                .iter()
                .zip(n)
                .zip(&counts)
                .map(|((s, &nj), &c)| nj as f64 / c as f64 * s)
                .sum())
        })
        .collect()
}
