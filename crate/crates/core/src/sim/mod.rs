//! Simulation designs, working-model recipes, repeated-sampling metrics and
//! the replication driver.

mod metrics;
mod population;
mod runner;

pub use metrics::{compute_metrics, MetricsRow, ReplicationOutcome};
pub use population::{
    calibrate_intercept, gen_population_sim1, gen_population_sim2, DrawnSamples, Population,
};
pub use runner::{run_method, run_replications, EstimatorConfig, RunSummary};

use serde::{Deserialize, Serialize};

use crate::formula::{Shape, Term};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimIConfig {
    pub population_size: usize,
    pub n_a: usize,
    pub n_r: usize,
    /// Target correlation between `y` and `Σ x_k`.
    pub rho_target: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SimIConfig {
    fn default() -> Self {
        Self {
            population_size: 100_000,
            n_a: 500,
            n_r: 500,
            rho_target: 0.8,
            replications: 50,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimIIConfig {
    pub population_size: usize,
    pub n_a: usize,
    pub n_r: usize,
    /// Correlation between `x` and `d`.
    pub rho: f64,
    /// Slope of `x` in the `S_A` selection model.
    pub gamma2: f64,
    pub f_kind: Shape,
    pub outcome: OutcomeKind,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SimIIConfig {
    fn default() -> Self {
        Self {
            population_size: 100_000,
            n_a: 500,
            n_r: 1000,
            rho: 0.5,
            gamma2: 0.3,
            f_kind: Shape::Lin,
            outcome: OutcomeKind::Continuous,
            replications: 50,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "study")]
pub enum StudyConfig {
    #[serde(rename = "1")]
    One(SimIConfig),
    #[serde(rename = "2")]
    Two(SimIIConfig),
}

impl StudyConfig {
    pub fn number(&self) -> u8 {
        match self {
            StudyConfig::One(_) => 1,
            StudyConfig::Two(_) => 2,
        }
    }

    pub fn replications(&self) -> usize {
        match self {
            StudyConfig::One(c) => c.replications,
            StudyConfig::Two(c) => c.replications,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            StudyConfig::One(c) => c.seed,
            StudyConfig::Two(c) => c.seed,
        }
    }

    pub fn generate(&self) -> crate::Result<Population> {
        match self {
            StudyConfig::One(c) => gen_population_sim1(c),
            StudyConfig::Two(c) => gen_population_sim2(c),
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            StudyConfig::One(_) => Shape::Lin,
            StudyConfig::Two(c) => c.f_kind,
        }
    }
}

/// Which working models are correctly specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub qr_true: bool,
    pub pm_true: bool,
}

impl Scenario {
    pub const GRID: [Scenario; 4] = [
        Scenario {
            qr_true: true,
            pm_true: true,
        },
        Scenario {
            qr_true: true,
            pm_true: false,
        },
        Scenario {
            qr_true: false,
            pm_true: true,
        },
        Scenario {
            qr_true: false,
            pm_true: false,
        },
    ];

    pub fn label(&self) -> String {
        format!("QR-{}/PM-{}", self.qr_true, self.pm_true)
    }
}

/// Working-model covariates `(QR, PM)` for a scenario.
///
/// Study 1 drops `x4` from a misspecified model. Study 2 selects `S_A` on
/// `x` alone, so the QR model is `x` (misspecified: `x²`); the PM uses
/// `(x², d²)` in place of `(f(x), d, x·d)`.
pub fn apply_misspecification(
    scenario: Scenario,
    study: u8,
    shape: Shape,
) -> (Vec<Term>, Vec<Term>) {
    let v = Term::var;
    match study {
        1 => {
            let full: Vec<Term> = ["x1", "x2", "x3", "x4"].iter().map(|n| v(n)).collect();
            let pick = |ok: bool| if ok { full.clone() } else { full[..3].to_vec() };
            (pick(scenario.qr_true), pick(scenario.pm_true))
        }
        _ => {
            let qr = if scenario.qr_true {
                vec![v("x")]
            } else {
                vec![Term::Square("x".into())]
            };
            let pm = if scenario.pm_true {
                vec![
                    Term::Shaped(shape, "x".into()),
                    v("d"),
                    Term::Product("x".into(), "d".into()),
                ]
            } else {
                vec![Term::Square("x".into()), Term::Square("d".into())]
            };
            (qr, pm)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_one_drops_x4() {
        let (qr, pm) = apply_misspecification(
            Scenario {
                qr_true: true,
                pm_true: false,
            },
            1,
            Shape::Lin,
        );
        assert_eq!(qr.len(), 4);
        assert_eq!(pm, vec![Term::var("x1"), Term::var("x2"), Term::var("x3")]);
    }

    #[test]
    fn study_two_squares_x() {
        let (qr, _) = apply_misspecification(
            Scenario {
                qr_true: false,
                pm_true: true,
            },
            2,
            Shape::Sin,
        );
        assert_eq!(qr, vec![Term::Square("x".into())]);
        let (qr, _) = apply_misspecification(
            Scenario {
                qr_true: true,
                pm_true: true,
            },
            2,
            Shape::Sin,
        );
        assert_eq!(qr, vec![Term::var("x")]);
    }

    #[test]
    fn config_json_round_trip() {
        let c = StudyConfig::Two(SimIIConfig::default());
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"study\":\"2\""));
        assert_eq!(serde_json::from_str::<StudyConfig>(&s).unwrap(), c);
    }
}
