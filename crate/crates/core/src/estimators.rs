//! Population-mean estimators and their interval machinery.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::dirichlet::Conjugacy;
use crate::bayes::hmc::HmcConfig;
use crate::data::{derive_post_strata, CombinedSample};
use crate::formula::{design, Term};
use crate::fpbb::{draw_polya, expand_predictions, PolyaPosterior};
use crate::glm::{fit_glm_offset, predict_glm_offset, Family, GlmSpec};
use crate::joint::{
    fit_joint, Component, JointModel, JointPosterior, JointSpec, OutcomeFamily,
    PosteriorDiagnostics, Prediction,
};
use crate::linalg::{mean, sd, sorted_copy};
use crate::papp::{estimate_papp, hajek_mean, PappOptions};
use crate::rng::rng_for;
use crate::{Error, Result};

/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;
const BOOT_STREAM: u64 = 0x626f_6f74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GPPP")]
    Gppp,
    #[serde(rename = "LWP")]
    Lwp,
    #[serde(rename = "AIPW")]
    Aipw,
    #[serde(rename = "PAPP")]
    Papp,
    #[serde(rename = "UW")]
    Uw,
    #[serde(rename = "FW")]
    Fw,
    #[serde(rename = "UW_R")]
    UwR,
    #[serde(rename = "FW_R")]
    FwR,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Gppp,
        Method::Lwp,
        Method::Aipw,
        Method::Papp,
        Method::Uw,
        Method::Fw,
        Method::UwR,
        Method::FwR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gppp => "GPPP",
            Method::Lwp => "LWP",
            Method::Aipw => "AIPW",
            Method::Papp => "PAPP",
            Method::Uw => "UW",
            Method::Fw => "FW",
            Method::UwR => "UW_R",
            Method::FwR => "FW_R",
        }
    }

    /// Whether the method runs the Bayesian joint model.
    pub fn is_bayesian(self) -> bool {
        matches!(self, Method::Gppp | Method::Lwp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Validation(format!(
                    "unknown method `{s}`; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub point: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub level: f64,
    pub variance: Option<f64>,
    /// Posterior draws or bootstrap replicates behind the interval.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub draws: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clamped_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failed_replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sampler: Option<PosteriorDiagnostics>,
}

impl EstimateReport {
    pub fn point_only(method: Method, point: f64) -> Self {
        Self {
            method,
            point,
            lower: None,
            upper: None,
            level: 0.95,
            variance: None,
            draws: Vec::new(),
            clamped_count: None,
            failed_replicates: None,
            seed: None,
            sampler: None,
        }
    }

    pub fn interval(&self) -> Option<(f64, f64)> {
        Some((self.lower?, self.upper?))
    }

    pub fn covers(&self, truth: f64) -> Option<bool> {
        self.interval().map(|(l, u)| l <= truth && truth <= u)
    }

    pub fn width(&self) -> Option<f64> {
        self.interval().map(|(l, u)| u - l)
    }
}

/// Empirical interval from the order statistics at `ceil(q·M)` for
/// `q = (1 − level)/2` and `1 − (1 − level)/2`.
pub fn percentile_interval(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if draws.len() < 2 {
        return Err(Error::Validation(
            "percentile interval needs at least two draws".into(),
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("level {level} outside (0, 1)")));
    }
    let s = sorted_copy(draws);
    let m = s.len() as f64;
    let pick = |q: f64| {
        let k = ((q * m - 1e-9).ceil() as usize).clamp(1, s.len());
        s[k - 1]
    };
    let a = (1.0 - level) / 2.0;
    Ok((pick(a), pick(1.0 - a)))
}

/// Summarizes draws into a report: point = mean, percentile interval.
pub fn report_from_draws(method: Method, draws: Vec<f64>, level: f64) -> Result<EstimateReport> {
    let (lower, upper) = percentile_interval(&draws, level)?;
    let mut r = EstimateReport::point_only(method, mean(&draws));
    r.lower = Some(lower);
    r.upper = Some(upper);
    r.level = level;
    r.variance = Some(sd(&draws).powi(2));
    r.draws = draws;
    Ok(r)
}

/// One draw of the population mean: `(Σ_A (y − ŷ) + ŷ_U)/N`.
pub fn gppp_draw(y_a: &[f64], yhat_a: &[f64], expanded_total: f64, population_size: f64) -> f64 {
    let bias: f64 = y_a.iter().zip(yhat_a).map(|(y, h)| y - h).sum();
    (bias + expanded_total) / population_size
}

/// Combines joint-posterior predictions with Pólya-posterior expansions.
pub fn estimate_gppp(
    method: Method,
    sample: &CombinedSample,
    posterior: &JointPosterior,
    polya: &PolyaPosterior,
    strata: &crate::data::PostStrata,
    level: f64,
) -> Result<EstimateReport> {
    if posterior.y_rep_a.len() != polya.len() {
        return Err(Error::Dimension(format!(
            "{} posterior draws but {} Pólya draws",
            posterior.y_rep_a.len(),
            polya.len()
        )));
    }
    let totals = expand_predictions(polya, strata, &posterior.y_rep_r)?;
    let y_a = sample.outcomes_a();
    let n = polya.population_size as f64;
    let draws = posterior
        .y_rep_a
        .iter()
        .zip(&totals)
        .map(|(yhat, t)| gppp_draw(&y_a, yhat, *t, n))
        .collect();
    let mut r = report_from_draws(method, draws, level)?;
    r.sampler = Some(posterior.diagnostics.clone());
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BayesConfig {
    pub hmc: HmcConfig,
    pub basis_size: usize,
    pub boundary_factor: f64,
    pub conjugacy: Conjugacy,
    /// Dirichlet concentration shared by every stratum.
    pub dirichlet_alpha: f64,
    pub weight_tolerance: f64,
    pub use_known_ref: bool,
    pub prediction: Prediction,
    pub level: f64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self {
            hmc: HmcConfig::default(),
            basis_size: 10,
            boundary_factor: 1.25,
            conjugacy: Conjugacy::Printed,
            dirichlet_alpha: 1.0,
            weight_tolerance: 1e-9,
            use_known_ref: true,
            prediction: Prediction::Mean,
            level: 0.95,
        }
    }
}

/// Full pipeline for GPPP (`Component::Gp`) or LWP (`Component::Lwp`).
pub fn estimate_bayes(
    sample: &CombinedSample,
    family: OutcomeFamily,
    component: Component,
    qr_terms: &[Term],
    pm_terms: &[Term],
    cfg: &BayesConfig,
) -> Result<(EstimateReport, JointPosterior)> {
    let mut spec = JointSpec::new(family, component, qr_terms.to_vec(), pm_terms.to_vec());
    spec.basis_size = cfg.basis_size;
    spec.boundary_factor = cfg.boundary_factor;
    spec.use_known_ref = cfg.use_known_ref;
    spec.prediction = cfg.prediction;
    let model = JointModel::assemble(sample, spec)?;
    let (posterior, _) = fit_joint(&model, &cfg.hmc)?;
    let strata = derive_post_strata(sample, cfg.weight_tolerance)?;
    let polya = draw_polya(
        &strata,
        sample.population_size(),
        posterior.n_draws(),
        &vec![cfg.dirichlet_alpha; strata.len()],
        cfg.conjugacy,
        cfg.hmc.seed,
    )?;
    let method = match component {
        Component::Lwp => Method::Lwp,
        _ => Method::Gppp,
    };
    let mut report = estimate_gppp(method, sample, &posterior, &polya, &strata, cfg.level)?;
    report.seed = Some(cfg.hmc.seed);
    Ok((report, posterior))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    /// Largest tolerated share of failed replicates.
    pub max_failure_rate: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 100,
            seed: 0,
            level: 0.95,
            max_failure_rate: 0.10,
        }
    }
}

fn outcome_glm_family(family: OutcomeFamily) -> Family {
    match family {
        OutcomeFamily::Normal => Family::GaussianIdentity,
        OutcomeFamily::BernoulliLogit => Family::BernoulliLogit,
        OutcomeFamily::NegbinomLogOffset => Family::NegbinomLog,
    }
}

/// AIPW point estimate with Hájek normalization on both arms.
pub fn aipw_point(
    sample: &CombinedSample,
    family: OutcomeFamily,
    qr_terms: &[Term],
    pm_terms: &[Term],
    papp: &PappOptions,
) -> Result<(f64, usize)> {
    let fit = estimate_papp(sample, qr_terms, papp)?;
    let pi_a = fit.pi_a_sample(sample);
    let x = design(sample, pm_terms)?;
    let idx_a = sample.indices_a();
    let idx_r = sample.indices_r();
    let xa = x.select_rows(&idx_a);
    let xr = x.select_rows(&idx_r);
    let log_t = sample
        .offsets()
        .map(|t| t.iter().map(|v| v.ln()).collect::<Vec<_>>());
    let off = |idx: &[usize]| {
        log_t
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect::<Vec<_>>())
    };
    let (off_a, off_r) = match family {
        OutcomeFamily::NegbinomLogOffset => (off(&idx_a), off(&idx_r)),
        _ => (None, None),
    };
    let spec = GlmSpec::new(outcome_glm_family(family));
    let y_a = sample.outcomes_a();
    let m = fit_glm_offset(&spec, &xa, &y_a, None, off_a.as_deref())?;
    if !m.coefficients.iter().all(|c| c.is_finite()) {
        return Err(Error::Singular("outcome model diverged".into()));
    }
    let m_a = predict_glm_offset(&m, &spec, &xa, off_a.as_deref())?;
    let m_r = predict_glm_offset(&m, &spec, &xr, off_r.as_deref())?;
    Ok((
        aipw_combine(&y_a, &m_a, &pi_a, &m_r, &sample.weights_r()),
        fit.clamped_count,
    ))
}

/// `Σ_A (y − m)/π ÷ Σ_A 1/π  +  Σ_R w m ÷ Σ_R w`.
pub fn aipw_combine(y_a: &[f64], m_a: &[f64], pi_a: &[f64], m_r: &[f64], w_r: &[f64]) -> f64 {
    let resid: Vec<f64> = y_a.iter().zip(m_a).map(|(y, m)| y - m).collect();
    hajek_mean(&resid, pi_a)
        + m_r.iter().zip(w_r).map(|(m, w)| m * w).sum::<f64>() / w_r.iter().sum::<f64>()
}

/// PAPP Hájek mean of the observed outcomes.
pub fn papp_point(
    sample: &CombinedSample,
    qr_terms: &[Term],
    papp: &PappOptions,
) -> Result<(f64, usize)> {
    let fit = estimate_papp(sample, qr_terms, papp)?;
    Ok((
        hajek_mean(&sample.outcomes_a(), &fit.pi_a_sample(sample)),
        fit.clamped_count,
    ))
}

/// Draws a bootstrap resample: `S_A` and `S_R` are each resampled with
/// replacement, independently; reference weights travel with their units.
pub fn bootstrap_resample(sample: &CombinedSample, rng: &mut crate::rng::Rng) -> CombinedSample {
    let a = sample.indices_a();
    let r = sample.indices_r();
    let mut idx: Vec<usize> = (0..a.len())
        .map(|_| a[rng.random_range(0..a.len())])
        .collect();
    idx.extend((0..r.len()).map(|_| r[rng.random_range(0..r.len())]));
    sample.resample(&idx)
}

/// Point estimate plus a bootstrap z-interval.
pub fn bootstrap_estimate<F>(
    method: Method,
    sample: &CombinedSample,
    cfg: &BootstrapConfig,
    point_fn: F,
) -> Result<EstimateReport>
where
    F: Fn(&CombinedSample) -> Result<(f64, usize)> + Sync,
{
    if cfg.replicates < 2 {
        return Err(Error::Validation(
            "bootstrap needs at least two replicates".into(),
        ));
    }
    let (point, clamped) = point_fn(sample)?;
    let reps: Vec<Option<f64>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(cfg.seed, &[BOOT_STREAM, b as u64]);
            let s = bootstrap_resample(sample, &mut rng);
            point_fn(&s).ok().map(|p| p.0).filter(|v| v.is_finite())
        })
        .collect();
    let ok: Vec<f64> = reps.iter().flatten().copied().collect();
    let failed = cfg.replicates - ok.len();
    if failed as f64 > cfg.max_failure_rate * cfg.replicates as f64 || ok.len() < 2 {
        return Err(Error::TooManyFailures {
            failed,
            attempted: cfg.replicates,
            message: format!("{method} bootstrap replicates failed"),
        });
    }
    let se = sd(&ok);
    let z = crate::estimators::normal_quantile(1.0 - (1.0 - cfg.level) / 2.0);
    let mut r = EstimateReport::point_only(method, point);
    r.lower = Some(point - z * se);
    r.upper = Some(point + z * se);
    r.level = cfg.level;
    r.variance = Some(se * se);
    r.draws = ok;
    r.clamped_count = Some(clamped);
    r.failed_replicates = Some(failed);
    r.seed = Some(cfg.seed);
    Ok(r)
}

pub fn estimate_aipw(
    sample: &CombinedSample,
    family: OutcomeFamily,
    qr_terms: &[Term],
    pm_terms: &[Term],
    papp: &PappOptions,
    cfg: &BootstrapConfig,
) -> Result<EstimateReport> {
    bootstrap_estimate(Method::Aipw, sample, cfg, |s| {
        aipw_point(s, family, qr_terms, pm_terms, papp)
    })
}

pub fn estimate_papp_mean(
    sample: &CombinedSample,
    qr_terms: &[Term],
    papp: &PappOptions,
    cfg: &BootstrapConfig,
) -> Result<EstimateReport> {
    bootstrap_estimate(Method::Papp, sample, cfg, |s| papp_point(s, qr_terms, papp))
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    if (p - 0.975).abs() < 1e-15 {
        return Z_975;
    }
    Normal::standard().inverse_cdf(p)
}

/// Weighted (Hájek) mean with a linearization z-interval; `weights = None`
/// gives the unweighted mean with its usual standard error.
pub fn weighted_mean_report(
    method: Method,
    y: &[f64],
    weights: Option<&[f64]>,
    level: f64,
) -> Result<EstimateReport> {
    if y.len() < 2 {
        return Err(Error::Validation(format!(
            "{method} needs at least two outcomes"
        )));
    }
    let w: Vec<f64> = weights.map_or_else(|| vec![1.0; y.len()], |w| w.to_vec());
    if w.len() != y.len() {
        return Err(Error::Dimension(
            "weights and outcomes differ in length".into(),
        ));
    }
    let tw: f64 = w.iter().sum();
    let point = y.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / tw;
    let n = y.len() as f64;
    let var = y
        .iter()
        .zip(&w)
        .map(|(y, w)| (w * (y - point) / tw).powi(2))
        .sum::<f64>()
        * n
        / (n - 1.0);
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let se = var.sqrt();
    let mut r = EstimateReport::point_only(method, point);
    r.lower = Some(point - z * se);
    r.upper = Some(point + z * se);
    r.level = level;
    r.variance = Some(var);
    Ok(r)
}
