//! Log prior densities with derivatives.
//!
//! Every function returns `(log p(x), d log p / dx)`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    StudentT {
        df: f64,
        loc: f64,
        scale: f64,
    },
    /// Student-t folded at its location; support `x > loc`.
    HalfStudentT {
        df: f64,
        loc: f64,
        scale: f64,
    },
    HalfCauchy {
        scale: f64,
    },
    /// Generalized inverse Gaussian read as density
    /// `∝ x^{p−1} exp(−(a·x + b/x)/2)`.
    Gig {
        p: f64,
        a: f64,
        b: f64,
    },
    /// Symmetric Dirichlet concentration.
    Dirichlet {
        concentration: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub applies_to: String,
}

impl PriorSpec {
    pub fn new(kind: PriorKind, applies_to: &str) -> Result<Self> {
        let ok = match kind {
            PriorKind::StudentT { df, scale, .. } | PriorKind::HalfStudentT { df, scale, .. } => {
                df > 0.0 && scale > 0.0
            }
            PriorKind::HalfCauchy { scale } => scale > 0.0,
            PriorKind::Gig { a, b, .. } => a > 0.0 && b > 0.0,
            PriorKind::Dirichlet { concentration } => concentration > 0.0,
        };
        if !ok {
            return Err(Error::Validation(format!(
                "invalid prior for `{applies_to}`"
            )));
        }
        Ok(Self {
            kind,
            applies_to: applies_to.to_string(),
        })
    }

    /// Log density and derivative at `x`; `-inf` outside the support.
    pub fn log_density(&self, x: f64) -> (f64, f64) {
        match self.kind {
            PriorKind::StudentT { df, loc, scale } => student_t(x, df, loc, scale),
            PriorKind::HalfStudentT { df, loc, scale } => {
                if x <= loc {
                    (f64::NEG_INFINITY, 0.0)
                } else {
                    half_student_t(x, df, scale)
                }
            }
            PriorKind::HalfCauchy { scale } => half_cauchy(x, scale),
            PriorKind::Gig { p, a, b } => gig_unnormalized(x, p, a, b),
            PriorKind::Dirichlet { .. } => (0.0, 0.0),
        }
    }

    /// Defaults used by the joint model.
    pub fn defaults() -> Vec<PriorSpec> {
        let t = PriorKind::StudentT {
            df: 3.0,
            loc: 0.0,
            scale: 1.0,
        };
        let ht = PriorKind::HalfStudentT {
            df: 3.0,
            loc: 0.0,
            scale: 1.0,
        };
        vec![
            PriorSpec {
                kind: t,
                applies_to: "theta".into(),
            },
            PriorSpec {
                kind: t,
                applies_to: "gamma".into(),
            },
            PriorSpec {
                kind: t,
                applies_to: "phi".into(),
            },
            PriorSpec {
                kind: ht,
                applies_to: "alpha".into(),
            },
            PriorSpec {
                kind: ht,
                applies_to: "sigma".into(),
            },
            PriorSpec {
                kind: ht,
                applies_to: "lambda".into(),
            },
            PriorSpec {
                kind: PriorKind::Gig {
                    p: 0.0,
                    a: 1.0,
                    b: 2.0,
                },
                applies_to: "rho".into(),
            },
            PriorSpec {
                kind: PriorKind::HalfCauchy { scale: 3.0 },
                applies_to: "nb_sigma".into(),
            },
            PriorSpec {
                kind: PriorKind::Dirichlet { concentration: 1.0 },
                applies_to: "xi".into(),
            },
        ]
    }
}

pub fn student_t(x: f64, df: f64, loc: f64, scale: f64) -> (f64, f64) {
    let z = (x - loc) / scale;
    let c = ln_gamma((df + 1.0) / 2.0)
        - ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - scale.ln();
    let lp = c - (df + 1.0) / 2.0 * (z * z / df).ln_1p();
    let d = -(df + 1.0) * z / (df + z * z) / scale;
    (lp, d)
}

/// Half-t on `(0, ∞)` with location 0.
pub fn half_student_t(x: f64, df: f64, scale: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    let (lp, d) = student_t(x, df, 0.0, scale);
    (lp + std::f64::consts::LN_2, d)
}

pub fn half_cauchy(x: f64, scale: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    let z = x / scale;
    (
        (2.0 / (std::f64::consts::PI * scale)).ln() - (z * z).ln_1p(),
        -2.0 * z / (1.0 + z * z) / scale,
    )
}

/// GIG log density without its normalizing constant (which depends only on
/// the hyperparameters).
pub fn gig_unnormalized(x: f64, p: f64, a: f64, b: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    (
        (p - 1.0) * x.ln() - 0.5 * (a * x + b / x),
        (p - 1.0) / x - 0.5 * (a - b / (x * x)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t3_at_zero() {
        // ln Γ(2) − ln Γ(1.5) − ½ ln(3π), evaluated in extended precision
        let (lp, d) = student_t(0.0, 3.0, 0.0, 1.0);
        assert!((lp - (-1.000_888_849_6)).abs() < 1e-9, "{lp}");
        assert_eq!(d, 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        let check = |f: &dyn Fn(f64) -> (f64, f64), x: f64| {
            let fd = (f(x + h).0 - f(x - h).0) / (2.0 * h);
            assert!((fd - f(x).1).abs() < 1e-6 * (1.0 + fd.abs()), "x={x}");
        };
        for x in [0.3, 1.7, 4.0] {
            check(&|v| student_t(v, 3.0, 0.5, 2.0), x);
            check(&|v| half_student_t(v, 3.0, 1.0), x);
            check(&|v| half_cauchy(v, 3.0), x);
            check(&|v| gig_unnormalized(v, 0.0, 1.0, 2.0), x);
        }
    }

    #[test]
    fn half_densities_integrate_to_one() {
        // midpoint rule; truncated tails are below 1e-4
        let integrate = |f: &dyn Fn(f64) -> f64, top: f64| {
            let n = 2_000_000;
            let dx = top / n as f64;
            (0..n).map(|i| f((i as f64 + 0.5) * dx) * dx).sum::<f64>()
        };
        let t = integrate(&|x| half_student_t(x, 3.0, 1.0).0.exp(), 2000.0);
        let c = integrate(&|x| half_cauchy(x, 3.0).0.exp(), 50_000.0);
        assert!((t - 1.0).abs() < 1e-4, "{t}");
        assert!((c - 1.0).abs() < 1e-4, "{c}");
    }

    #[test]
    fn support_is_enforced() {
        let p = PriorSpec::new(
            PriorKind::HalfStudentT {
                df: 3.0,
                loc: 0.0,
                scale: 1.0,
            },
            "alpha",
        )
        .unwrap();
        assert_eq!(p.log_density(-0.1).0, f64::NEG_INFINITY);
        assert!(PriorSpec::new(
            PriorKind::StudentT {
                df: 0.0,
                loc: 0.0,
                scale: 1.0
            },
            "x"
        )
        .is_err());
    }
}
