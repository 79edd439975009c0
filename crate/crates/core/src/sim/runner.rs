use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, MetricsRow, ReplicationOutcome};
use super::population::{DrawnSamples, Population};
use super::{apply_misspecification, OutcomeKind, Scenario, StudyConfig};
use crate::estimators::{
    estimate_aipw, estimate_bayes, estimate_papp_mean, weighted_mean_report, BayesConfig,
    BootstrapConfig, EstimateReport, Method,
};
use crate::formula::Term;
use crate::joint::{Component, OutcomeFamily};
use crate::papp::PappOptions;
use crate::rng::{derive_seed, rng_for};
use crate::{Error, Result};

use rayon::prelude::*;

const SAMPLE_STREAM: u64 = 0x7361_6d70;

/// Estimator settings shared by every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub bayes: BayesConfig,
    pub bootstrap: BootstrapConfig,
    pub papp: PappOptions,
    /// Largest tolerated share of failed replications per row.
    pub max_failure_rate: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            bayes: BayesConfig::default(),
            bootstrap: BootstrapConfig::default(),
            papp: PappOptions::default(),
            max_failure_rate: 0.05,
        }
    }
}

/// One method's result in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub scenario: String,
    pub method: String,
    pub point: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub se: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub truth: f64,
    pub rows: Vec<MetricsRow>,
    pub replications: Vec<ReplicationRecord>,
    pub mean_n_a: f64,
    pub mean_n_r: f64,
}

/// Label used for methods that do not depend on the working models.
pub const ANY_SCENARIO: &str = "-";

fn needs_models(m: Method) -> bool {
    matches!(m, Method::Gppp | Method::Lwp | Method::Aipw | Method::Papp)
}

pub fn family_for(study: &StudyConfig) -> OutcomeFamily {
    match study {
        StudyConfig::Two(c) if c.outcome == OutcomeKind::Binary => OutcomeFamily::BernoulliLogit,
        _ => OutcomeFamily::Normal,
    }
}

/// Runs one method on one draw. Comparators read the population truth.
#[allow(clippy::too_many_arguments)]
pub fn run_method(
    method: Method,
    drawn: &DrawnSamples,
    pop: &Population,
    family: OutcomeFamily,
    qr: &[Term],
    pm: &[Term],
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<EstimateReport> {
    let s = &drawn.sample;
    let pick =
        |units: &[usize], f: &dyn Fn(usize) -> f64| units.iter().map(|&i| f(i)).collect::<Vec<_>>();
    match method {
        Method::Gppp | Method::Lwp => {
            let mut b = cfg.bayes.clone();
            b.hmc.seed = seed;
            let comp = if method == Method::Gppp {
                Component::Gp
            } else {
                Component::Lwp
            };
            Ok(estimate_bayes(s, family, comp, qr, pm, &b)?.0)
        }
        Method::Aipw => {
            let boot = BootstrapConfig {
                seed,
                ..cfg.bootstrap.clone()
            };
            estimate_aipw(s, family, qr, pm, &cfg.papp, &boot)
        }
        Method::Papp => {
            let boot = BootstrapConfig {
                seed,
                ..cfg.bootstrap.clone()
            };
            estimate_papp_mean(s, qr, &cfg.papp, &boot)
        }
        Method::Uw => weighted_mean_report(method, &s.outcomes_a(), None, cfg.bayes.level),
        Method::Fw => {
            let w = pick(&drawn.units_a, &|i| 1.0 / pop.pi_a[i]);
            weighted_mean_report(method, &s.outcomes_a(), Some(&w), cfg.bayes.level)
        }
        Method::UwR => {
            let y = pick(&drawn.units_r, &|i| pop.y[i]);
            weighted_mean_report(method, &y, None, cfg.bayes.level)
        }
        Method::FwR => {
            let y = pick(&drawn.units_r, &|i| pop.y[i]);
            let w = pick(&drawn.units_r, &|i| 1.0 / pop.pi_r[i]);
            weighted_mean_report(method, &y, Some(&w), cfg.bayes.level)
        }
    }
}

fn outcome_of(r: &EstimateReport) -> Result<ReplicationOutcome> {
    let (lower, upper) = r
        .interval()
        .ok_or_else(|| Error::Validation(format!("{} returned no interval", r.method)))?;
    let se = r
        .variance
        .map(f64::sqrt)
        .unwrap_or((upper - lower) / (2.0 * crate::estimators::Z_975));
    if !(r.point.is_finite() && lower.is_finite() && upper.is_finite()) {
        return Err(Error::Validation(format!(
            "{} returned a non-finite estimate",
            r.method
        )));
    }
    Ok(ReplicationOutcome {
        point: r.point,
        lower,
        upper,
        se,
    })
}

/// Repeated Poisson sampling from a fixed population. Replication `k` draws
/// its samples from the stream `(seed, k)` and each method gets a seed
/// derived from `(seed, k, scenario, method)`, so the table does not depend
/// on `workers`.
pub fn run_replications(
    study: &StudyConfig,
    pop: &Population,
    methods: &[Method],
    scenarios: &[Scenario],
    cfg: &EstimatorConfig,
    workers: usize,
) -> Result<RunSummary> {
    let k_total = study.replications();
    let seed = study.seed();
    if k_total == 0 {
        return Err(Error::Validation(
            "at least one replication is required".into(),
        ));
    }
    if methods.is_empty() {
        return Err(Error::Validation("no methods requested".into()));
    }
    let family = family_for(study);
    let truth = pop.mean_y();

    // (scenario label, method, scenario index) in output order
    let mut cells: Vec<(String, Method, usize)> = Vec::new();
    for &m in methods.iter().filter(|m| !needs_models(**m)) {
        cells.push((ANY_SCENARIO.to_string(), m, 0));
    }
    for (si, sc) in scenarios.iter().enumerate() {
        for &m in methods.iter().filter(|m| needs_models(**m)) {
            cells.push((sc.label(), m, si));
        }
    }
    if cells.iter().any(|c| c.0 != ANY_SCENARIO) && scenarios.is_empty() {
        return Err(Error::Validation(
            "model-based methods need a scenario grid".into(),
        ));
    }
    let formulas: Vec<(Vec<Term>, Vec<Term>)> = scenarios
        .iter()
        .map(|s| apply_misspecification(*s, study.number(), study.shape()))
        .collect();

    let one = |k: usize| -> (Vec<Result<ReplicationOutcome>>, usize, usize) {
        let mut rng = rng_for(seed, &[SAMPLE_STREAM, k as u64]);
        let drawn = pop.draw_samples(&mut rng);
        let results = cells
            .iter()
            .map(|(_, m, si)| {
                let drawn = drawn
                    .as_ref()
                    .map_err(|e| Error::Validation(e.to_string()))?;
                let (qr, pm) = formulas
                    .get(*si)
                    .map_or((&[][..], &[][..]), |f| (&f.0[..], &f.1[..]));
                let mseed = derive_seed(seed, &[k as u64, *si as u64, *m as u64]);
                run_method(*m, drawn, pop, family, qr, pm, cfg, mseed).and_then(|r| outcome_of(&r))
            })
            .collect();
        let (na, nr) = drawn
            .as_ref()
            .map_or((0, 0), |d| (d.units_a.len(), d.units_r.len()));
        (results, na, nr)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let per_rep: Vec<(Vec<Result<ReplicationOutcome>>, usize, usize)> =
        pool.install(|| (0..k_total).into_par_iter().map(one).collect());

    let mut rows = Vec::with_capacity(cells.len());
    let mut records = Vec::with_capacity(cells.len() * k_total);
    for (c, (label, m, _)) in cells.iter().enumerate() {
        let mut ok = Vec::with_capacity(k_total);
        let mut first_error = None;
        for (k, (res, _, _)) in per_rep.iter().enumerate() {
            let rec = match &res[c] {
                Ok(o) => {
                    ok.push(*o);
                    ReplicationRecord {
                        replication: k,
                        scenario: label.clone(),
                        method: m.to_string(),
                        point: Some(o.point),
                        lower: Some(o.lower),
                        upper: Some(o.upper),
                        se: Some(o.se),
                        error: None,
                    }
                }
                Err(e) => {
                    first_error.get_or_insert_with(|| e.to_string());
                    ReplicationRecord {
                        replication: k,
                        scenario: label.clone(),
                        method: m.to_string(),
                        point: None,
                        lower: None,
                        upper: None,
                        se: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            records.push(rec);
        }
        let failed = k_total - ok.len();
        if failed as f64 > cfg.max_failure_rate * k_total as f64 || ok.is_empty() {
            return Err(Error::TooManyFailures {
                failed,
                attempted: k_total,
                message: format!("{m} under {label}: {}", first_error.unwrap_or_default()),
            });
        }
        rows.push(compute_metrics(
            study.number(),
            label,
            m.name(),
            &ok,
            failed,
            truth,
        ));
    }
    let k = k_total as f64;
    Ok(RunSummary {
        truth,
        rows,
        replications: records,
        mean_n_a: per_rep.iter().map(|r| r.1 as f64).sum::<f64>() / k,
        mean_n_r: per_rep.iter().map(|r| r.2 as f64).sum::<f64>() / k,
    })
}
