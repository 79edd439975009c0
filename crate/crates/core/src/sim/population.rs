use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{OutcomeKind, SimIConfig, SimIIConfig};
use crate::data::{CombinedSample, UnitRecord};
use crate::glm::logistic;
use crate::linalg::{mean, pop_sd, Matrix};
use crate::rng::{rng_for, Rng};
use crate::{Error, Result};

const POPULATION_STREAM: u64 = 0x706f_7075;

/// A finite population with both sets of inclusion probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub x_names: Vec<String>,
    pub d_names: Vec<String>,
    pub x: Matrix,
    pub d: Matrix,
    pub y: Vec<f64>,
    pub pi_a: Vec<f64>,
    pub pi_r: Vec<f64>,
    /// Attach `π_R` to `S_A` records.
    pub ref_prob_known: bool,
    pub sigma: f64,
}

/// One Poisson draw of both samples.
#[derive(Debug, Clone)]
pub struct DrawnSamples {
    pub sample: CombinedSample,
    /// Population indices of `S_A` and `S_R` units, in record order.
    pub units_a: Vec<usize>,
    pub units_r: Vec<usize>,
}

impl Population {
    pub fn size(&self) -> usize {
        self.y.len()
    }

    pub fn mean_y(&self) -> f64 {
        mean(&self.y)
    }

    /// Independent Poisson samples: unit `i` enters `S_A` with probability
    /// `π_A,i` and `S_R` with probability `π_R,i`. A unit drawn into both
    /// yields one record in each.
    pub fn draw_samples(&self, rng: &mut Rng) -> Result<DrawnSamples> {
        let mut units_a = Vec::new();
        let mut units_r = Vec::new();
        for i in 0..self.size() {
            if rng.random::<f64>() < self.pi_a[i] {
                units_a.push(i);
            }
            if rng.random::<f64>() < self.pi_r[i] {
                units_r.push(i);
            }
        }
        let record = |i: usize, in_a: bool| UnitRecord {
            outcome: in_a.then_some(self.y[i]),
            x: self.x.row(i).to_vec(),
            d: self.d.row(i).to_vec(),
            in_a,
            in_r: !in_a,
            weight_r: (!in_a).then(|| 1.0 / self.pi_r[i]),
            offset: None,
            ref_prob: (in_a && self.ref_prob_known).then_some(self.pi_r[i]),
        };
        let records = units_a
            .iter()
            .map(|&i| record(i, true))
            .chain(units_r.iter().map(|&i| record(i, false)))
            .collect();
        let sample = CombinedSample::new(
            records,
            self.x_names.clone(),
            self.d_names.clone(),
            Some(self.size()),
        )?;
        Ok(DrawnSamples {
            sample,
            units_a,
            units_r,
        })
    }
}

/// Bisection for an intercept `c` with `total(c) = target`, where `total`
/// is increasing. Stops when `|total(c) − target| ≤ tol`.
pub fn calibrate_intercept(
    total: impl Fn(f64) -> f64,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Result<f64> {
    let (flo, fhi) = (total(lo) - target, total(hi) - target);
    if !(flo <= 0.0 && fhi >= 0.0) {
        return Err(Error::RootFinding(format!(
            "intercept bracket [{lo}, {hi}] does not contain the root (residuals {flo}, {fhi})"
        )));
    }
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        let f = total(mid) - target;
        if f.abs() <= tol || hi - lo < 1e-15 {
            return Ok(mid);
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn logistic_total(eta: &[f64]) -> impl Fn(f64) -> f64 + '_ {
    move |c| eta.iter().map(|e| logistic(c + e)).sum()
}

/// Population for the first design: four correlated covariates, a linear
/// outcome, logistic `S_A` selection and size-proportional `S_R` selection.
pub fn gen_population_sim1(cfg: &SimIConfig) -> Result<Population> {
    let n = cfg.population_size;
    if !(cfg.rho_target > 0.0 && cfg.rho_target < 1.0) {
        return Err(Error::Validation("rho_target must lie in (0, 1)".into()));
    }
    if cfg.n_a == 0 || cfg.n_r == 0 || cfg.n_a >= n || cfg.n_r >= n {
        return Err(Error::Validation(
            "sample sizes must lie strictly between 0 and N".into(),
        ));
    }
    let mut rng = rng_for(cfg.seed, &[POPULATION_STREAM]);
    let chi = ChiSquared::new(4.0).map_err(|e| Error::Validation(e.to_string()))?;
    let mut rows = Vec::with_capacity(n * 4);
    let mut z3 = Vec::with_capacity(n);
    let mut sum_x = Vec::with_capacity(n);
    for _ in 0..n {
        let z1 = (rng.random::<f64>() < 0.5) as u8 as f64;
        let z2 = rng.random_range(0.0..2.0);
        let e: f64 = Exp1.sample(&mut rng);
        let z4 = chi.sample(&mut rng);
        let x1 = z1;
        let x2 = z2 + 0.3 * z1;
        let x3 = e + 0.2 * (x1 + x2);
        let x4 = z4 + 0.1 * (x1 + x2 + x3);
        rows.extend([x1, x2, x3, x4]);
        z3.push(e);
        sum_x.push(x1 + x2 + x3 + x4);
    }
    let sigma = pop_sd(&sum_x) * (1.0 / (cfg.rho_target * cfg.rho_target) - 1.0).sqrt();
    let y: Vec<f64> = sum_x
        .iter()
        .map(|s| {
            let eps: f64 = rng.sample(StandardNormal);
            2.0 + s + sigma * eps
        })
        .collect();
    let x = Matrix::from_row_major(n, 4, rows)?;

    let eta: Vec<f64> = (0..n)
        .map(|i| {
            let r = x.row(i);
            0.1 * r[0] + 0.2 * r[1] + 0.1 * r[2] + 0.2 * r[3]
        })
        .collect();
    let g0 = calibrate_intercept(
        logistic_total(&eta),
        cfg.n_a as f64,
        -60.0,
        60.0,
        1e-9 * n as f64,
    )?;
    let pi_a = eta.iter().map(|e| logistic(g0 + e)).collect();

    let (zmin, zmax) = z3
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let g1 = (zmax - 50.0 * zmin) / 49.0;
    let size: Vec<f64> = z3.iter().map(|z| g1 + z).collect();
    let total: f64 = size.iter().sum();
    let pi_r: Vec<f64> = size.iter().map(|s| cfg.n_r as f64 * s / total).collect();
    if pi_r.iter().any(|p| *p > 1.0) {
        return Err(Error::Validation(
            "reference inclusion probabilities exceed 1; lower n_r".into(),
        ));
    }
    Ok(Population {
        x_names: ["x1", "x2", "x3", "x4"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        d_names: Vec::new(),
        x,
        d: Matrix::zeros(n, 0),
        y,
        pi_a,
        pi_r,
        ref_prob_known: true,
        sigma,
    })
}

/// Population for the second design: correlated `(d, x)`, an outcome with a
/// nonlinear `f(x)` plus interaction, `S_R` selection on `d` and `S_A`
/// selection on `x`.
pub fn gen_population_sim2(cfg: &SimIIConfig) -> Result<Population> {
    let n = cfg.population_size;
    if !(0.0..=0.95).contains(&cfg.rho) {
        return Err(Error::Validation("rho must lie in [0, 0.95]".into()));
    }
    if cfg.n_a == 0 || cfg.n_r == 0 || cfg.n_a >= n || cfg.n_r >= n {
        return Err(Error::Validation(
            "sample sizes must lie strictly between 0 and N".into(),
        ));
    }
    let mut rng = rng_for(cfg.seed, &[POPULATION_STREAM]);
    let mut xs = Vec::with_capacity(n);
    let mut ds = Vec::with_capacity(n);
    let sd_cond = (4.0 - 4.0 * cfg.rho * cfg.rho).sqrt();
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ds.push(2.0 * cfg.rho * x + sd_cond * z);
    }
    let signal: Vec<f64> = xs
        .iter()
        .zip(&ds)
        .map(|(&x, &d)| cfg.f_kind.eval(x) + d + 0.2 * x * d)
        .collect();
    let sigma = pop_sd(&signal) * (1.0f64 / 0.64 - 1.0).sqrt();
    let y: Vec<f64> = match cfg.outcome {
        OutcomeKind::Continuous => signal
            .iter()
            .map(|s| {
                let eps: f64 = rng.sample(StandardNormal);
                3.0 + s + sigma * eps
            })
            .collect(),
        OutcomeKind::Binary => signal
            .iter()
            .map(|s| (rng.random::<f64>() < logistic(s - 1.0)) as u8 as f64)
            .collect(),
    };

    let eta_r: Vec<f64> = ds.iter().map(|d| -0.4 * d).collect();
    let g0 = calibrate_intercept(
        logistic_total(&eta_r),
        cfg.n_r as f64,
        -60.0,
        60.0,
        1e-9 * n as f64,
    )?;
    let eta_a: Vec<f64> = xs.iter().map(|x| cfg.gamma2 * x).collect();
    let g1 = calibrate_intercept(
        logistic_total(&eta_a),
        cfg.n_a as f64,
        -60.0,
        60.0,
        1e-9 * n as f64,
    )?;
    Ok(Population {
        x_names: vec!["x".into()],
        d_names: vec!["d".into()],
        pi_a: eta_a.iter().map(|e| logistic(g1 + e)).collect(),
        pi_r: eta_r.iter().map(|e| logistic(g0 + e)).collect(),
        x: Matrix::from_row_major(n, 1, xs)?,
        d: Matrix::from_row_major(n, 1, ds)?,
        y,
        ref_prob_known: false,
        sigma,
    })
}
