use serde::{Deserialize, Serialize};

use crate::linalg::{mean, quantile_sorted, sd, sorted_copy};

/// What one replication reported for one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    /// Standard error reported by the method.
    pub se: f64,
}

/// Repeated-sampling summary of one method under one scenario. All
/// percentages are relative to the population mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub study: u8,
    pub scenario: String,
    pub method: String,
    pub replications: usize,
    pub failures: usize,
    pub r_bias: f64,
    pub r_mse: f64,
    pub cr_ci: f64,
    /// Mean interval length relative to the population mean, in percent.
    pub rl_ci: f64,
    /// Mean interval length on the outcome scale.
    pub l_ci: f64,
    pub r_se: f64,
    /// 2.5% and 97.5% percentiles of the relative bias across replications.
    pub bias_p025: f64,
    pub bias_p975: f64,
}

/// Aggregates successful replications against the true mean `truth`.
pub fn compute_metrics(
    study: u8,
    scenario: &str,
    method: &str,
    outcomes: &[ReplicationOutcome],
    failures: usize,
    truth: f64,
) -> MetricsRow {
    let k = outcomes.len();
    let points: Vec<f64> = outcomes.iter().map(|o| o.point).collect();
    let rel: Vec<f64> = points.iter().map(|p| 100.0 * (p - truth) / truth).collect();
    let r_bias = 100.0 * (mean(&points) - truth) / truth;
    let r_mse =
        100.0 * (points.iter().map(|p| (p - truth).powi(2)).sum::<f64>() / k as f64).sqrt() / truth;
    let cr_ci = 100.0
        * outcomes
            .iter()
            .filter(|o| o.lower <= truth && truth <= o.upper)
            .count() as f64
        / k as f64;
    let l_ci = outcomes.iter().map(|o| o.upper - o.lower).sum::<f64>() / k as f64;
    let emp_sd = if k > 1 { sd(&points) } else { f64::NAN };
    let r_se = outcomes.iter().map(|o| o.se).sum::<f64>() / k as f64 / emp_sd;
    let sorted = sorted_copy(&rel);
    MetricsRow {
        study,
        scenario: scenario.to_string(),
        method: method.to_string(),
        replications: k,
        failures,
        r_bias,
        r_mse,
        cr_ci,
        rl_ci: 100.0 * l_ci / truth,
        l_ci,
        r_se,
        bias_p025: if k > 0 {
            quantile_sorted(&sorted, 0.025)
        } else {
            f64::NAN
        },
        bias_p975: if k > 0 {
            quantile_sorted(&sorted, 0.975)
        } else {
            f64::NAN
        },
    }
}
