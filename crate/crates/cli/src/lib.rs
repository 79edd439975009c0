//! Batch commands behind the `gppp` binary.
//!
//! Every command writes into its output directory only:
//!
//! * `estimate`: `estimate_report.json`, `draws.csv`, `diagnostics.json`,
//!   `manifest.json`, `timings.json`
//! * `simulate`: `metrics.csv`, `replications.csv`, `manifest.json`,
//!   `timings.json`
//! * `diagnose`: `diagnostics.json`, `manifest.json`, `timings.json`
//!
//! All files except `timings.json` are byte-identical across reruns with the
//! same configuration and seed.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use gppp_core::data::{load_combined, CombinedSample, Schema};
use gppp_core::estimators::{
    estimate_aipw, estimate_bayes, estimate_papp_mean, weighted_mean_report, BayesConfig,
    BootstrapConfig, EstimateReport, Method,
};
use gppp_core::formula::{parse_terms, Term};
use gppp_core::gp::{kernel_smoother_weights, smoothed_reference_weights, KernelParams};
use gppp_core::joint::{Component, JointPosterior, OutcomeFamily};
use gppp_core::linalg::{quantile_sorted, sorted_copy};
use gppp_core::papp::{estimate_papp, PappOptions};
use gppp_core::sim::{run_replications, EstimatorConfig, Scenario, StudyConfig};
use gppp_core::Error;

pub const VERSION: &str = match option_env!("GPPP_GIT_DESCRIBE") {
    Some(v) => v,
    None => env!("CARGO_PKG_VERSION"),
};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const ESTIMATION: i32 = 3;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Validation(_)
            | Error::InvalidRow { .. }
            | Error::MissingColumn(_)
            | Error::Dimension(_)
            | Error::Csv(_)
            | Error::Json(_) => exit::VALIDATION,
            Error::Io(_) => exit::IO,
            _ => exit::ESTIMATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: exit::IO,
            message: e.to_string(),
        }
    }
}

fn validation(message: impl Into<String>) -> CliError {
    CliError {
        code: exit::VALIDATION,
        message: message.into(),
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Configuration for `estimate` and `diagnose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub methods: Vec<String>,
    pub family: OutcomeFamily,
    /// Membership/weight model terms, e.g. `["x1", "x2^2", "x1:d"]`.
    pub qr: Vec<String>,
    /// Outcome model terms.
    pub pm: Vec<String>,
    pub schema: Schema,
    /// Known population size; estimated from the reference weights if absent.
    pub population_size: Option<usize>,
    pub seed: u64,
    pub bayes: BayesConfig,
    pub bootstrap: BootstrapConfig,
    pub papp: PappOptions,
    /// Kernel used by the smoother diagnostic.
    pub kernel: KernelParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: vec!["GPPP".into()],
            family: OutcomeFamily::Normal,
            qr: Vec::new(),
            pm: Vec::new(),
            schema: Schema::default(),
            population_size: None,
            seed: 1,
            bayes: BayesConfig::default(),
            bootstrap: BootstrapConfig::default(),
            papp: PappOptions::default(),
            kernel: KernelParams {
                alpha: 1.0,
                rho: 1.0,
                tau: 1.0,
            },
        }
    }
}

impl RunConfig {
    fn terms(&self) -> CliResult<(Vec<Term>, Vec<Term>)> {
        let qr = parse_terms(&self.qr)?;
        let pm = parse_terms(&self.pm)?;
        if qr.is_empty() {
            return Err(validation("`qr` must list at least one covariate"));
        }
        Ok((qr, pm))
    }

    fn parsed_methods(&self) -> CliResult<Vec<Method>> {
        if self.methods.is_empty() {
            return Err(validation("no methods requested"));
        }
        let mut out = Vec::new();
        for m in &self.methods {
            let m: Method = m.parse()?;
            if matches!(m, Method::Fw | Method::UwR | Method::FwR) {
                return Err(validation(format!(
                    "{m} needs population truth and is only available in `simulate`"
                )));
            }
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }
}

/// Configuration for `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub design: StudyConfig,
    pub methods: Vec<String>,
    #[serde(default = "default_grid")]
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub estimators: EstimatorConfig,
}

fn default_grid() -> Vec<Scenario> {
    Scenario::GRID.to_vec()
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text =
        fs::read_to_string(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| validation(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: &impl Serialize,
    seed: u64,
    inputs: Value,
) -> CliResult<()> {
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command,
            "version": VERSION,
            "seed": seed,
            "inputs": inputs,
            "config": config,
        }),
    )
}

fn write_timings(out: &Path, timings: &[(String, f64)]) -> CliResult<()> {
    let map: serde_json::Map<String, Value> =
        timings.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    write_json(&out.join("timings.json"), &Value::Object(map))
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(
        || p.display().to_string(),
        |f| f.to_string_lossy().into_owned(),
    )
}

fn load(cfg: &RunConfig, data: &Path) -> CliResult<CombinedSample> {
    Ok(load_combined(data, &cfg.schema, cfg.population_size)?)
}

struct MethodRun {
    report: EstimateReport,
    posterior: Option<JointPosterior>,
}

fn run_estimate_method(
    m: Method,
    sample: &CombinedSample,
    cfg: &RunConfig,
    qr: &[Term],
    pm: &[Term],
) -> gppp_core::Result<MethodRun> {
    let seed = gppp_core::rng::derive_seed(cfg.seed, &[m as u64]);
    match m {
        Method::Gppp | Method::Lwp => {
            let mut b = cfg.bayes.clone();
            b.hmc.seed = seed;
            let comp = if m == Method::Gppp {
                Component::Gp
            } else {
                Component::Lwp
            };
            let (report, posterior) = estimate_bayes(sample, cfg.family, comp, qr, pm, &b)?;
            Ok(MethodRun {
                report,
                posterior: Some(posterior),
            })
        }
        Method::Aipw | Method::Papp => {
            let boot = BootstrapConfig {
                seed,
                ..cfg.bootstrap.clone()
            };
            let report = if m == Method::Aipw {
                estimate_aipw(sample, cfg.family, qr, pm, &cfg.papp, &boot)?
            } else {
                estimate_papp_mean(sample, qr, &cfg.papp, &boot)?
            };
            Ok(MethodRun {
                report,
                posterior: None,
            })
        }
        _ => Ok(MethodRun {
            report: weighted_mean_report(m, &sample.outcomes_a(), None, cfg.bayes.level)?,
            posterior: None,
        }),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// `estimate --config cfg.json --data data.csv --out dir`.
pub fn cmd_estimate(config: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let t0 = Instant::now();
    let cfg: RunConfig = read_json(config)?;
    let methods = cfg.parsed_methods()?;
    let (qr, pm) = cfg.terms()?;
    if methods
        .iter()
        .any(|m| matches!(m, Method::Gppp | Method::Lwp | Method::Aipw))
        && pm.is_empty()
    {
        return Err(validation("`pm` must list at least one covariate"));
    }
    let sample = load(&cfg, data)?;
    prepare_out(out)?;
    write_manifest(
        out,
        "estimate",
        &cfg,
        cfg.seed,
        json!({ "data": file_name(data) }),
    )?;
    let mut timings = vec![("load".to_string(), t0.elapsed().as_secs_f64())];

    let mut reports = Vec::new();
    let mut diagnostics = serde_json::Map::new();
    let mut draws = String::from("method,draw,value\n");
    let mut failure: Option<CliError> = None;
    for m in methods {
        let t = Instant::now();
        match run_estimate_method(m, &sample, &cfg, &qr, &pm) {
            Ok(run) => {
                for (i, v) in run.report.draws.iter().enumerate() {
                    draws.push_str(&format!("{m},{i},{}\n", fmt_f64(*v)));
                }
                let mut d = json!({
                    "clamped_count": run.report.clamped_count,
                    "failed_replicates": run.report.failed_replicates,
                    "sampler": run.report.sampler,
                });
                if let Some(post) = &run.posterior {
                    write_posterior(
                        &out.join(format!("posterior_{}.csv", m.name().to_lowercase())),
                        post,
                    )?;
                    d["parameters"] = json!(post.names);
                }
                diagnostics.insert(m.to_string(), d);
                let mut r = run.report;
                let n_draws = r.draws.len();
                r.draws.clear();
                let mut v = serde_json::to_value(&r).map_err(|e| validation(e.to_string()))?;
                v["n_draws"] = json!(n_draws);
                reports.push(v);
            }
            Err(e) => {
                diagnostics.insert(m.to_string(), json!({ "error": e.to_string() }));
                failure.get_or_insert_with(|| CliError::from(e));
            }
        }
        timings.push((m.to_string(), t.elapsed().as_secs_f64()));
    }
    write_json(&out.join("diagnostics.json"), &Value::Object(diagnostics))?;
    timings.push(("total".into(), t0.elapsed().as_secs_f64()));
    write_timings(out, &timings)?;
    if let Some(e) = failure {
        return Err(e);
    }
    fs::write(out.join("draws.csv"), draws)?;
    write_json(
        &out.join("estimate_report.json"),
        &json!({
            "version": VERSION,
            "seed": cfg.seed,
            "n_a": sample.n_a(),
            "n_r": sample.n_r(),
            "population_size": sample.population_size(),
            "reports": reports,
        }),
    )?;
    Ok(())
}

fn write_posterior(path: &Path, post: &JointPosterior) -> CliResult<()> {
    let mut s = String::from("draw,");
    s.push_str(&post.names.join(","));
    s.push('\n');
    for (i, d) in post.draws.iter().enumerate() {
        s.push_str(&i.to_string());
        for v in d {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// `simulate --config sim.json --workers W --out dir [--scenario-grid g.json]`.
pub fn cmd_simulate(
    config: &Path,
    workers: usize,
    scenario_grid: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let t0 = Instant::now();
    let mut cfg: SimConfig = read_json(config)?;
    if let Some(g) = scenario_grid {
        cfg.scenarios = read_json(g)?;
    }
    let mut methods = Vec::new();
    for m in &cfg.methods {
        methods.push(m.parse::<Method>()?);
    }
    prepare_out(out)?;
    write_manifest(
        out,
        "simulate",
        &cfg,
        cfg.design.seed(),
        json!({ "scenario_grid": scenario_grid.map(file_name) }),
    )?;
    let pop = cfg.design.generate()?;
    let t_pop = t0.elapsed().as_secs_f64();
    let result = run_replications(
        &cfg.design,
        &pop,
        &methods,
        &cfg.scenarios,
        &cfg.estimators,
        workers,
    );
    let timings = vec![
        ("population".to_string(), t_pop),
        ("total".to_string(), t0.elapsed().as_secs_f64()),
    ];
    write_timings(out, &timings)?;
    let summary = result?;
    let mut w = csv_writer(&out.join("metrics.csv"))?;
    for r in &summary.rows {
        w.serialize(r).map_err(|e| validation(e.to_string()))?;
    }
    w.flush()?;
    let mut w = csv_writer(&out.join("replications.csv"))?;
    for r in &summary.replications {
        w.serialize(r).map_err(|e| validation(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::from(Error::from(e)))
}

fn quantiles(v: &[f64]) -> Value {
    let s = sorted_copy(v);
    let qs = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0];
    json!(qs
        .iter()
        .map(|&q| quantile_sorted(&s, q))
        .collect::<Vec<_>>())
}

/// Indices flagged by Tukey's rule with fence `k·IQR`.
pub fn tukey_outliers(v: &[f64], k: f64) -> Vec<usize> {
    let s = sorted_copy(v);
    let (q1, q3) = (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.75));
    let (lo, hi) = (q1 - k * (q3 - q1), q3 + k * (q3 - q1));
    v.iter()
        .enumerate()
        .filter(|(_, x)| **x < lo || **x > hi)
        .map(|(i, _)| i)
        .collect()
}

/// `diagnose --config cfg.json --data data.csv --out dir`.
pub fn cmd_diagnose(config: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let t0 = Instant::now();
    let cfg: RunConfig = read_json(config)?;
    let (qr, _) = cfg.terms()?;
    let sample = load(&cfg, data)?;
    prepare_out(out)?;
    write_manifest(
        out,
        "diagnose",
        &cfg,
        cfg.seed,
        json!({ "data": file_name(data) }),
    )?;

    let fit = estimate_papp(&sample, &qr, &cfg.papp)?;
    let log_a: Vec<f64> = sample
        .indices_a()
        .iter()
        .map(|&i| fit.pi_a[i].ln())
        .collect();
    let log_r: Vec<f64> = sample
        .indices_r()
        .iter()
        .map(|&i| fit.pi_a[i].ln())
        .collect();
    let qa = quantiles(&log_a);
    let qrr = quantiles(&log_r);
    let gaps: Vec<f64> = qa
        .as_array()
        .unwrap()
        .iter()
        .zip(qrr.as_array().unwrap())
        .map(|(a, r)| a.as_f64().unwrap() - r.as_f64().unwrap())
        .collect();
    let log_w: Vec<f64> = log_a.iter().map(|v| -v).collect();
    let outliers = tukey_outliers(&log_w, 1.5);

    let smoother = kernel_smoother_weights(&log_r, &log_a, &cfg.kernel)?;
    let row_sums: Vec<f64> = (0..smoother.rows())
        .map(|i| smoother.row(i).iter().sum())
        .collect();
    let ess: Vec<f64> = (0..smoother.rows())
        .map(|i| 1.0 / smoother.row(i).iter().map(|k| k * k).sum::<f64>())
        .collect();
    let max_share: Vec<f64> = (0..smoother.rows())
        .map(|i| smoother.row(i).iter().cloned().fold(0.0, f64::max))
        .collect();
    let w_r = sample.weights_r();
    let smoothed = smoothed_reference_weights(&smoother, &w_r)?;
    let max_dev = row_sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);

    write_json(
        &out.join("diagnostics.json"),
        &json!({
            "overlap": {
                "quantile_levels": [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0],
                "log_pi_a_in_sa": qa,
                "log_pi_a_in_sr": qrr,
                "gaps": gaps,
            },
            "pseudo_weights": {
                "rule": "tukey_1.5_iqr_on_log_weight",
                "outlier_count": outliers.len(),
                "outlier_rows": outliers.iter().map(|&k| sample.indices_a()[k]).collect::<Vec<_>>(),
                "clamped_count": fit.clamped_count,
            },
            "kernel_smoother": {
                "kernel": cfg.kernel,
                "row_sums": quantiles(&row_sums),
                "max_row_sum_deviation": max_dev,
                "effective_sources": quantiles(&ess),
                "max_share": quantiles(&max_share),
                "smoothed_weight_total": smoothed.iter().sum::<f64>(),
                "reference_weight_total": w_r.iter().sum::<f64>(),
            },
        }),
    )?;
    write_timings(out, &[("total".into(), t0.elapsed().as_secs_f64())])?;
    Ok(())
}
