//! Two-step pseudo-inclusion probabilities.
//!
//! The pooled membership odds `exp(x'φ)` are divided by the modeled
//! reference weight `E(w_R | x) = exp(x'γ)`, giving `π_A = exp{x'(φ − γ)}`.
//! When the reference inclusion probability is known for every
//! non-probability unit the weight regression is skipped and
//! `π_A = π_R · exp(x'φ)`.

use serde::{Deserialize, Serialize};

use crate::data::CombinedSample;
use crate::estimators::{EstimateReport, Method};
use crate::formula::{design, Term};
use crate::glm::{fit_glm, Family, GlmSpec};
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Lower clamp for pseudo-inclusion probabilities.
pub const PI_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PappOptions {
    /// Use known reference probabilities for `S_A` units when every one of
    /// them carries one.
    pub use_known_ref: bool,
    /// Optional cap on the membership odds before the division.
    pub odds_cap: Option<f64>,
    pub ridge: f64,
}

impl Default for PappOptions {
    fn default() -> Self {
        Self {
            use_known_ref: true,
            odds_cap: None,
            ridge: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoInclusionFit {
    /// Weight-model coefficients (intercept first); empty when reference
    /// probabilities were known.
    pub gamma: Vec<f64>,
    /// Membership-model coefficients (intercept first).
    pub phi: Vec<f64>,
    /// Unclamped `log π_A` for every pooled record.
    pub log_pi: Vec<f64>,
    /// Clamped `π_A` for every pooled record.
    pub pi_a: Vec<f64>,
    pub clamped_count: usize,
    pub known_ref: bool,
}

impl PseudoInclusionFit {
    /// `π_A` restricted to `S_A` records, in record order.
    pub fn pi_a_sample(&self, sample: &CombinedSample) -> Vec<f64> {
        sample
            .indices_a()
            .into_iter()
            .map(|i| self.pi_a[i])
            .collect()
    }
}

/// Clamps `exp(log_pi)` into `[PI_FLOOR, 1]`, returning the clamp count.
pub fn clamp_probabilities(log_pi: &[f64]) -> (Vec<f64>, usize) {
    let mut count = 0;
    let pi = log_pi
        .iter()
        .map(|&l| {
            let p = l.exp();
            if p < PI_FLOOR {
                count += 1;
                PI_FLOOR
            } else if p > 1.0 {
                count += 1;
                1.0
            } else {
                p
            }
        })
        .collect();
    (pi, count)
}

/// Pseudo-inclusion fit using covariates `terms` for both working models.
pub fn estimate_papp(
    sample: &CombinedSample,
    terms: &[Term],
    opts: &PappOptions,
) -> Result<PseudoInclusionFit> {
    if sample.n_a() == 0 || sample.n_r() == 0 {
        return Err(Error::Validation("both samples must be nonempty".into()));
    }
    let x = design(sample, terms)?;
    estimate_papp_design(sample, &x, opts)
}

pub fn estimate_papp_design(
    sample: &CombinedSample,
    x: &Matrix,
    opts: &PappOptions,
) -> Result<PseudoInclusionFit> {
    let member_spec = GlmSpec::new(Family::BernoulliLogit).with_ridge(opts.ridge);
    let member = fit_glm(&member_spec, x, &sample.membership(), None)?;
    let log_odds = crate::glm::linear_predictor(&member, &member_spec, x, None)?;
    let log_odds: Vec<f64> = match opts.odds_cap {
        Some(cap) => log_odds.into_iter().map(|v| v.min(cap.ln())).collect(),
        None => log_odds,
    };

    let known = opts
        .use_known_ref
        .then(|| sample.known_ref_probs())
        .flatten();
    let known_ref = known.is_some();
    let (gamma, log_pi) = match known {
        Some(pr) => (
            Vec::new(),
            log_odds
                .iter()
                .zip(&pr)
                .map(|(o, p)| o + p.ln())
                .collect::<Vec<_>>(),
        ),
        None => {
            let idx_r = sample.indices_r();
            let xr = x.select_rows(&idx_r);
            let weight_spec = GlmSpec::new(Family::GaussianLogmean).with_ridge(opts.ridge);
            let wfit = fit_glm(&weight_spec, &xr, &sample.weights_r(), None)?;
            let log_w = crate::glm::linear_predictor(&wfit, &weight_spec, x, None)?;
            (
                wfit.coefficients,
                log_odds.iter().zip(&log_w).map(|(o, w)| o - w).collect(),
            )
        }
    };
    let (pi_a, clamped_count) = clamp_probabilities(&log_pi);
    if clamped_count == pi_a.len() {
        return Err(Error::DegeneratePropensity(format!(
            "all {clamped_count} pseudo-inclusion probabilities hit a clamp"
        )));
    }
    Ok(PseudoInclusionFit {
        gamma,
        phi: member.coefficients,
        log_pi,
        pi_a,
        clamped_count,
        known_ref,
    })
}

/// Hájek mean `Σ y/π ÷ Σ 1/π`.
pub fn hajek_mean(y: &[f64], pi: &[f64]) -> f64 {
    let (num, den) = y
        .iter()
        .zip(pi)
        .fold((0.0, 0.0), |(n, d), (y, p)| (n + y / p, d + 1.0 / p));
    num / den
}

/// Inverse pseudo-inclusion weighted mean of the observed outcomes. The
/// interval is left empty; the bootstrap fills it.
pub fn papp_weighted_mean(
    sample: &CombinedSample,
    fit: &PseudoInclusionFit,
) -> Result<EstimateReport> {
    if fit.pi_a.len() != sample.n_c() {
        return Err(Error::Dimension(
            "pseudo-inclusion fit does not cover the sample".into(),
        ));
    }
    let point = hajek_mean(&sample.outcomes_a(), &fit.pi_a_sample(sample));
    let mut report = EstimateReport::point_only(Method::Papp, point);
    report.clamped_count = Some(fit.clamped_count);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_coefficients_give_unit_probability() {
        let (pi, n) = clamp_probabilities(&[0.0, 0.0]);
        assert_eq!(pi, vec![1.0, 1.0]);
        assert_eq!(n, 0);
    }

    #[test]
    fn constant_predictor() {
        let (pi, _) = clamp_probabilities(&[0.05f64.ln(); 3]);
        assert!(pi.iter().all(|p| (p - 0.05).abs() < 1e-15));
    }

    #[test]
    fn clamps_are_counted() {
        let (pi, n) = clamp_probabilities(&[-30.0, 0.5, -1.0]);
        assert_eq!(n, 2);
        assert_eq!(pi[0], PI_FLOOR);
        assert_eq!(pi[1], 1.0);
    }

    #[test]
    fn two_point_hajek() {
        assert!((hajek_mean(&[0.0, 10.0], &[0.1, 0.9]) - 1.0).abs() < 1e-12);
        assert!((hajek_mean(&[1.0, 2.0, 6.0], &[0.3; 3]) - 3.0).abs() < 1e-12);
    }
}
