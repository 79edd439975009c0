//! Penalized GLM fitting by Newton / iteratively reweighted least squares.
//!
//! Every family maximizes a per-unit objective
//! `Q(β) = ℓ(β) / Σw − (ridge/2)·Σ β_j²` where the intercept (when added) is
//! not penalized. Convergence is declared when `max |∇Q| ≤ tol`.
//!
//! For the two Gaussian families `ℓ` uses a fixed variance equal to the
//! weighted mean square of the response, so the criterion does not depend on
//! the units of `y` and stays bounded for exact fits.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::linalg::{solve_spd_checked, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BernoulliLogit,
    GaussianIdentity,
    /// Normal errors with mean `exp(x'β)`; fitted by Gauss-Newton.
    GaussianLogmean,
    /// NB2 with log link; offsets enter the linear predictor.
    NegbinomLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmSpec {
    pub family: Family,
    pub include_intercept: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub ridge: f64,
}

impl GlmSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            include_intercept: true,
            max_iter: 100,
            tol: 1e-8,
            ridge: 1e-8,
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn without_intercept(mut self) -> Self {
        self.include_intercept = false;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Validation("GLM tolerance must be positive".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Validation("GLM ridge must be nonnegative".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Validation("GLM max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    /// Intercept first when the model includes one.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Residual mean square for Gaussian families; `1/size` for the
    /// negative binomial.
    pub dispersion: Option<f64>,
}

struct Problem<'a> {
    x: Matrix,
    y: &'a [f64],
    w: Vec<f64>,
    off: Vec<f64>,
    wsum: f64,
    /// Fixed variance used by the Gaussian objectives.
    scale: f64,
    penalized: Vec<bool>,
    family: Family,
    ridge: f64,
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn nb_unit_loglik(y: f64, mu: f64, size: f64) -> f64 {
    ln_gamma(y + size) - ln_gamma(size) - ln_gamma(y + 1.0)
        + size * (size / (size + mu)).ln()
        + if y > 0.0 {
            y * (mu / (size + mu)).ln()
        } else {
            0.0
        }
}

impl<'a> Problem<'a> {
    fn new(
        spec: &GlmSpec,
        design: &Matrix,
        y: &'a [f64],
        weights: Option<&[f64]>,
        offset: Option<&[f64]>,
    ) -> Result<Self> {
        spec.validate()?;
        let n = design.rows();
        if y.len() != n {
            return Err(Error::Dimension(format!(
                "design has {n} rows but response has {}",
                y.len()
            )));
        }
        if n == 0 {
            return Err(Error::Validation("empty GLM design".into()));
        }
        if !design.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite GLM input".into()));
        }
        let w = match weights {
            Some(w) if w.len() != n => {
                return Err(Error::Dimension("case weight length mismatch".into()))
            }
            Some(w) if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
                return Err(Error::Validation(
                    "case weights must be finite and nonnegative".into(),
                ))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let off = match offset {
            Some(o) if o.len() != n => {
                return Err(Error::Dimension("offset length mismatch".into()))
            }
            Some(o) => o.to_vec(),
            None => vec![0.0; n],
        };
        match spec.family {
            Family::BernoulliLogit if y.iter().any(|v| !(0.0..=1.0).contains(v)) => {
                return Err(Error::Validation("logistic response outside [0, 1]".into()))
            }
            Family::NegbinomLog if y.iter().any(|v| *v < 0.0) => {
                return Err(Error::Validation("negative count response".into()))
            }
            _ => {}
        }
        let wsum: f64 = w.iter().sum();
        if !(wsum > 0.0) {
            return Err(Error::Validation("case weights sum to zero".into()));
        }
        let ms = y.iter().zip(&w).map(|(v, wi)| wi * v * v).sum::<f64>() / wsum;
        let x = if spec.include_intercept {
            design.with_intercept()
        } else {
            design.clone()
        };
        let penalized = (0..x.cols())
            .map(|j| !(spec.include_intercept && j == 0))
            .collect();
        Ok(Self {
            x,
            y,
            w,
            off,
            wsum,
            scale: if ms > 0.0 { ms } else { 1.0 },
            penalized,
            family: spec.family,
            ridge: spec.ridge,
        })
    }

    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.x.rows())
            .map(|i| self.off[i] + crate::linalg::dot(self.x.row(i), beta))
            .collect()
    }

    fn penalty(&self, beta: &[f64]) -> f64 {
        0.5 * self.ridge
            * beta
                .iter()
                .zip(&self.penalized)
                .filter(|(_, &p)| p)
                .map(|(b, _)| b * b)
                .sum::<f64>()
    }

    /// Per-unit objective; `size` only matters for the negative binomial.
    fn objective(&self, beta: &[f64], size: f64) -> f64 {
        let eta = self.eta(beta);
        let mut acc = 0.0;
        for i in 0..eta.len() {
            let (y, w) = (self.y[i], self.w[i]);
            acc += w * match self.family {
                Family::BernoulliLogit => y * eta[i] - softplus(eta[i]),
                Family::GaussianIdentity => -0.5 * (y - eta[i]).powi(2) / self.scale,
                Family::GaussianLogmean => -0.5 * (y - eta[i].exp()).powi(2) / self.scale,
                Family::NegbinomLog => nb_unit_loglik(y, eta[i].exp(), size),
            };
        }
        acc / self.wsum - self.penalty(beta)
    }

    /// Gradient of the objective and the positive-definite curvature used
    /// for the Newton / Gauss-Newton / Fisher step.
    fn gradient_and_information(
        &self,
        beta: &[f64],
        size: f64,
    ) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
        let k = self.x.cols();
        let eta = self.eta(beta);
        let mut g = vec![0.0; k];
        let mut info = nalgebra::DMatrix::<f64>::zeros(k, k);
        for i in 0..eta.len() {
            let (y, w) = (self.y[i], self.w[i]);
            let (resid, curv) = match self.family {
                Family::BernoulliLogit => {
                    let p = logistic(eta[i]);
                    (y - p, p * (1.0 - p))
                }
                Family::GaussianIdentity => ((y - eta[i]) / self.scale, 1.0 / self.scale),
                Family::GaussianLogmean => {
                    let mu = eta[i].exp();
                    ((y - mu) * mu / self.scale, mu * mu / self.scale)
                }
                Family::NegbinomLog => {
                    let mu = eta[i].exp();
                    (size * (y - mu) / (size + mu), size * mu / (size + mu))
                }
            };
            let row = self.x.row(i);
            for a in 0..k {
                g[a] += w * resid * row[a];
                let ca = w * curv * row[a];
                for b in 0..=a {
                    info[(a, b)] += ca * row[b];
                }
            }
        }
        for a in 0..k {
            g[a] /= self.wsum;
            for b in 0..=a {
                info[(a, b)] /= self.wsum;
                info[(b, a)] = info[(a, b)];
            }
            if self.penalized[a] {
                g[a] -= self.ridge * beta[a];
                info[(a, a)] += self.ridge;
            }
        }
        (g, info)
    }

    fn initial(&self) -> Result<Vec<f64>> {
        let mut beta = vec![0.0; self.x.cols()];
        if !self.penalized.first().is_some_and(|p| !p) {
            return Ok(beta);
        }
        let ybar = self.y.iter().zip(&self.w).map(|(y, w)| y * w).sum::<f64>() / self.wsum;
        let obar = self
            .off
            .iter()
            .zip(&self.w)
            .map(|(o, w)| o * w)
            .sum::<f64>()
            / self.wsum;
        beta[0] = match self.family {
            Family::BernoulliLogit => {
                let p = ybar.clamp(1e-6, 1.0 - 1e-6);
                (p / (1.0 - p)).ln()
            }
            Family::GaussianIdentity => ybar - obar,
            Family::GaussianLogmean => {
                if !(ybar > 0.0) {
                    return Err(Error::Validation(
                        "log-mean regression needs a positive response mean".into(),
                    ));
                }
                ybar.ln() - obar
            }
            Family::NegbinomLog => ybar.max(1e-8).ln() - obar,
        };
        Ok(beta)
    }

    /// One damped Newton step; returns false when no halving improves `Q`.
    fn newton_step(&self, beta: &mut Vec<f64>, size: f64) -> Result<bool> {
        let (g, info) = self.gradient_and_information(beta, size);
        let delta = solve_spd_checked(info, &g).ok_or_else(|| {
            Error::Singular("GLM information matrix is singular (rank-deficient design?)".into())
        })?;
        let q0 = self.objective(beta, size);
        let slack = 1e-14 * (1.0 + q0.abs());
        let mut t = 1.0;
        for _ in 0..=10 {
            let cand: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + t * d).collect();
            let q1 = self.objective(&cand, size);
            if q1.is_finite() && q1 >= q0 - slack {
                *beta = cand;
                return Ok(true);
            }
            t *= 0.5;
        }
        Ok(false)
    }

    fn size_gradient(&self, beta: &[f64], log_size: f64) -> f64 {
        let size = log_size.exp();
        let eta = self.eta(beta);
        let mut acc = 0.0;
        for i in 0..eta.len() {
            let (y, mu) = (self.y[i], eta[i].exp());
            acc += self.w[i]
                * size
                * (digamma(y + size) - digamma(size)
                    + (size / (size + mu)).ln()
                    + (mu - y) / (size + mu));
        }
        acc / self.wsum
    }

    /// Safeguarded 1-d Newton on log(size) with the coefficients held fixed.
    fn update_size(&self, beta: &[f64], log_size: f64) -> f64 {
        const LO: f64 = -20.0;
        const HI: f64 = 20.0;
        let mut t = log_size;
        for _ in 0..20 {
            let g = self.size_gradient(beta, t);
            let h = 1e-4;
            let curv =
                (self.size_gradient(beta, t + h) - self.size_gradient(beta, t - h)) / (2.0 * h);
            let mut step = if curv < 0.0 { -g / curv } else { g.signum() };
            step = step.clamp(-2.0, 2.0);
            let q0 = self.objective(beta, t.exp());
            let mut accepted = false;
            for _ in 0..10 {
                let cand = (t + step).clamp(LO, HI);
                if self.objective(beta, cand.exp()) >= q0 {
                    accepted = (cand - t).abs() > 0.0;
                    t = cand;
                    break;
                }
                step *= 0.5;
            }
            if !accepted || step.abs() < 1e-12 {
                break;
            }
        }
        t
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    fn finish(&self, beta: Vec<f64>, converged: bool, iterations: usize, size: f64) -> GlmFit {
        let eta = self.eta(&beta);
        let (log_likelihood, dispersion) = match self.family {
            Family::BernoulliLogit => (
                (0..eta.len())
                    .map(|i| self.w[i] * (self.y[i] * eta[i] - softplus(eta[i])))
                    .sum(),
                None,
            ),
            Family::GaussianIdentity | Family::GaussianLogmean => {
                let rss: f64 = (0..eta.len())
                    .map(|i| {
                        let mu = if self.family == Family::GaussianIdentity {
                            eta[i]
                        } else {
                            eta[i].exp()
                        };
                        self.w[i] * (self.y[i] - mu).powi(2)
                    })
                    .sum();
                let s2 = (rss / self.wsum).max(f64::MIN_POSITIVE);
                (
                    -0.5 * self.wsum * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0),
                    Some(s2),
                )
            }
            Family::NegbinomLog => (
                (0..eta.len())
                    .map(|i| self.w[i] * nb_unit_loglik(self.y[i], eta[i].exp(), size))
                    .sum(),
                Some(1.0 / size),
            ),
        };
        GlmFit {
            coefficients: beta,
            converged,
            iterations,
            log_likelihood,
            dispersion,
        }
    }
}

/// Fits a GLM without offset. See [`fit_glm_offset`].
pub fn fit_glm(
    spec: &GlmSpec,
    design: &Matrix,
    response: &[f64],
    case_weights: Option<&[f64]>,
) -> Result<GlmFit> {
    fit_glm_offset(spec, design, response, case_weights, None)
}

/// Fits a GLM. `offset` is added to the linear predictor (pass log exposure
/// for count models). Non-convergence is reported through
/// [`GlmFit::converged`], not as an error.
pub fn fit_glm_offset(
    spec: &GlmSpec,
    design: &Matrix,
    response: &[f64],
    case_weights: Option<&[f64]>,
    offset: Option<&[f64]>,
) -> Result<GlmFit> {
    let pb = Problem::new(spec, design, response, case_weights, offset)?;
    let mut beta = pb.initial()?;
    let mut log_size = 0.0;
    let nb = spec.family == Family::NegbinomLog;
    if nb {
        log_size = pb.update_size(&beta, log_size);
    }
    for it in 0..spec.max_iter {
        let size = log_size.exp();
        let (g, _) = pb.gradient_and_information(&beta, size);
        let size_ok =
            !nb || pb.size_gradient(&beta, log_size).abs() <= spec.tol || log_size.abs() >= 20.0;
        if Problem::max_abs(&g) <= spec.tol && size_ok {
            return Ok(pb.finish(beta, true, it, size));
        }
        let moved = pb.newton_step(&mut beta, size)?;
        if nb {
            log_size = pb.update_size(&beta, log_size);
        } else if !moved {
            break;
        }
    }
    let size = log_size.exp();
    let (g, _) = pb.gradient_and_information(&beta, size);
    let size_ok =
        !nb || pb.size_gradient(&beta, log_size).abs() <= spec.tol || log_size.abs() >= 20.0;
    let converged = Problem::max_abs(&g) <= spec.tol && size_ok;
    Ok(pb.finish(beta, converged, spec.max_iter, size))
}

/// Gradient of the per-unit penalized objective at `fit`'s coefficients.
pub fn glm_score(
    spec: &GlmSpec,
    design: &Matrix,
    response: &[f64],
    case_weights: Option<&[f64]>,
    offset: Option<&[f64]>,
    fit: &GlmFit,
) -> Result<Vec<f64>> {
    let pb = Problem::new(spec, design, response, case_weights, offset)?;
    let size = match (spec.family, fit.dispersion) {
        (Family::NegbinomLog, Some(s)) => 1.0 / s,
        _ => 1.0,
    };
    Ok(pb.gradient_and_information(&fit.coefficients, size).0)
}

/// Linear predictor `x'β` (plus offset) for each row of `design`.
pub fn linear_predictor(
    fit: &GlmFit,
    spec: &GlmSpec,
    design: &Matrix,
    offset: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let k = design.cols() + spec.include_intercept as usize;
    if k != fit.coefficients.len() {
        return Err(Error::Dimension(format!(
            "design implies {k} coefficients, fit has {}",
            fit.coefficients.len()
        )));
    }
    if let Some(o) = offset {
        if o.len() != design.rows() {
            return Err(Error::Dimension("offset length mismatch".into()));
        }
    }
    let (b0, slopes) = if spec.include_intercept {
        (fit.coefficients[0], &fit.coefficients[1..])
    } else {
        (0.0, &fit.coefficients[..])
    };
    Ok((0..design.rows())
        .map(|i| b0 + crate::linalg::dot(design.row(i), slopes) + offset.map_or(0.0, |o| o[i]))
        .collect())
}

/// Mean-scale predictions (inverse link applied).
pub fn predict_glm(fit: &GlmFit, spec: &GlmSpec, design: &Matrix) -> Result<Vec<f64>> {
    predict_glm_offset(fit, spec, design, None)
}

pub fn predict_glm_offset(
    fit: &GlmFit,
    spec: &GlmSpec,
    design: &Matrix,
    offset: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let eta = linear_predictor(fit, spec, design, offset)?;
    Ok(eta
        .into_iter()
        .map(|e| match spec.family {
            Family::BernoulliLogit => logistic(e),
            Family::GaussianIdentity => e,
            Family::GaussianLogmean | Family::NegbinomLog => e.exp(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(n: usize) -> Matrix {
        Matrix::zeros(n, 0)
    }

    #[test]
    fn intercept_only_logit_is_logit_of_mean() {
        let y = [1., 1., 1., 1., 1., 1., 1., 0., 0., 0.];
        let spec = GlmSpec::new(Family::BernoulliLogit);
        let fit = fit_glm(&spec, &ones(10), &y, None).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - (0.7f64 / 0.3).ln()).abs() < 1e-9);
        assert!((fit.coefficients[0] - 0.8473).abs() < 1e-4);
        let p = predict_glm(&fit, &spec, &ones(4)).unwrap();
        assert!(p.iter().all(|v| (v - 0.7).abs() < 1e-9));
    }

    #[test]
    fn intercept_only_logmean_is_log_constant() {
        let y = [3.5; 6];
        let spec = GlmSpec::new(Family::GaussianLogmean);
        let fit = fit_glm(&spec, &ones(6), &y, None).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - 3.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_coefficients_predict_link_inverse_of_zero() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let fit = GlmFit {
            coefficients: vec![0.0; 3],
            converged: true,
            iterations: 0,
            log_likelihood: 0.0,
            dispersion: None,
        };
        let p = predict_glm(&fit, &GlmSpec::new(Family::BernoulliLogit), &x).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let m = predict_glm(&fit, &GlmSpec::new(Family::GaussianLogmean), &x).unwrap();
        assert_eq!(m, vec![1.0, 1.0]);
        let bad = Matrix::zeros(2, 5);
        assert!(predict_glm(&fit, &GlmSpec::new(Family::BernoulliLogit), &bad).is_err());
    }

    #[test]
    fn gaussian_identity_matches_normal_equations() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let y = [1.0, 3.1, 4.9, 7.2];
        let fit = fit_glm(
            &GlmSpec::new(Family::GaussianIdentity).with_ridge(0.0),
            &x,
            &y,
            None,
        )
        .unwrap();
        // closed-form simple regression
        let (xm, ym) = (1.5, (1.0 + 3.1 + 4.9 + 7.2) / 4.0);
        let sxy: f64 = [0.0, 1.0, 2.0, 3.0]
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - xm) * (b - ym))
            .sum();
        let slope = sxy / 5.0;
        assert!((fit.coefficients[1] - slope).abs() < 1e-9);
        assert!((fit.coefficients[0] - (ym - slope * xm)).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_without_ridge_is_singular() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let y = [0.0, 1.0, 1.0];
        let err = fit_glm(
            &GlmSpec::new(Family::BernoulliLogit).with_ridge(0.0),
            &x,
            &y,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
        assert!(fit_glm(
            &GlmSpec::new(Family::BernoulliLogit).with_ridge(1e-6),
            &x,
            &y,
            None
        )
        .is_ok());
    }

    #[test]
    fn negbinom_recovers_coefficients_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let size = 2.0;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut off = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let t: f64 = 0.5 + rng.random::<f64>() * 2.0;
            let mu = t * (0.5 + 0.8 * x).exp();
            let lam = rand_distr::Distribution::sample(
                &rand_distr::Gamma::new(size, mu / size).unwrap(),
                &mut rng,
            );
            let k = rand_distr::Distribution::sample(
                &rand_distr::Poisson::new(lam.max(1e-12)).unwrap(),
                &mut rng,
            );
            rows.push(vec![x]);
            y.push(k);
            off.push(t.ln());
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let spec = GlmSpec::new(Family::NegbinomLog);
        let fit = fit_glm_offset(&spec, &x, &y, None, Some(&off)).unwrap();
        assert!(fit.converged, "{fit:?}");
        assert!((fit.coefficients[0] - 0.5).abs() < 0.08);
        assert!((fit.coefficients[1] - 0.8).abs() < 0.1);
        let sigma = fit.dispersion.unwrap();
        assert!((1.0 / sigma - size).abs() < 0.4, "size {}", 1.0 / sigma);
    }
}
