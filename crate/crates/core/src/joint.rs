//! Joint posterior over the weight model, the membership model and the
//! partially linear outcome model.
//!
//! All covariates are standardized with pooled-sample moments before they
//! enter the likelihood, reference weights are divided by their mean, and a
//! normal outcome is standardized with `S_A` moments. Reported draws are
//! transformed back to the original scales.
//!
//! Per `S_A` unit the outcome linear predictor is
//! `η = θ₀ + pm'θ + h(u) (+ log exposure)` with `u = log π_A`, recomputed
//! from the current `φ, γ` at every density evaluation. The term `h` is
//!
//! * `Gp`: `Σ_j √S(ω_j) φ_j(u) β_j + κ'g(u)` with `β, κ ~ N(0, 1)` and `g`
//!   the polynomial-kernel feature map,
//! * `Lwp`: `θ* · k · exp(−u)` with `k` fixing the scale at the initial fit,
//! * `Linear`: zero.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::bayes::hmc::{run_hmc, HmcConfig, HmcOutput, LogDensity};
use crate::bayes::priors::{PriorKind, PriorSpec};
use crate::data::CombinedSample;
use crate::formula::{design, Term};
use crate::glm::{fit_glm, fit_glm_offset, logistic, Family, GlmSpec};
use crate::gp::{build_basis, poly_features, poly_features_du, LowRankBasis};
use crate::linalg::{dot, mean, pop_sd, Matrix};
use crate::rng::rng_for;
use crate::{Error, Result};

const SQRT_12_SQRT3: f64 = 4.559_014_113_909_555; // √(12√3)
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const PREDICT_STREAM: u64 = 0x7072_6564;
/// Resolution of the standardized normal outcome.
const OUTCOME_GRID: f64 = 1.0 / (1u64 << 36) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    Normal,
    BernoulliLogit,
    /// NB2 with log link; every record must carry an exposure.
    NegbinomLogOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Gp,
    Lwp,
    Linear,
}

/// What the reference-sample predictions fed to the expansion hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Conditional means `E[y | x, draw]`.
    #[default]
    Mean,
    /// One outcome realization per unit and draw.
    Realized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub family: OutcomeFamily,
    pub component: Component,
    /// Covariates of the membership and weight models.
    pub qr_terms: Vec<Term>,
    /// Linear covariates of the outcome model.
    pub pm_terms: Vec<Term>,
    pub basis_size: usize,
    pub boundary_factor: f64,
    /// Offset of the polynomial kernel (held fixed).
    pub tau: f64,
    /// Replace the weight model by known reference probabilities when every
    /// `S_A` unit carries one.
    pub use_known_ref: bool,
    pub prediction: Prediction,
    pub priors: Vec<PriorSpec>,
}

impl JointSpec {
    pub fn new(
        family: OutcomeFamily,
        component: Component,
        qr_terms: Vec<Term>,
        pm_terms: Vec<Term>,
    ) -> Self {
        Self {
            family,
            component,
            qr_terms,
            pm_terms,
            basis_size: 10,
            boundary_factor: 1.25,
            tau: 1.0,
            use_known_ref: true,
            prediction: Prediction::Mean,
            priors: PriorSpec::defaults(),
        }
    }

    fn prior(&self, block: &str) -> Result<PriorSpec> {
        if let Some(p) = self.priors.iter().find(|p| p.applies_to == block) {
            return Ok(p.clone());
        }
        PriorSpec::defaults()
            .into_iter()
            .find(|p| p.applies_to == block)
            .ok_or_else(|| Error::Validation(format!("no prior for block `{block}`")))
    }
}

/// Column standardization `(x − m) / s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Matrix) -> Self {
        let (center, scale) = (0..x.cols())
            .map(|j| {
                let c = x.column(j);
                let s = pop_sd(&c);
                (mean(&c), if s > 0.0 { s } else { 1.0 })
            })
            .unzip();
        Self { center, scale }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.center[j]) / self.scale[j];
            }
        }
        out
    }

    /// Maps intercept-first coefficients on the standardized scale back to
    /// the original covariates.
    fn unscale(&self, coef: &[f64]) -> Vec<f64> {
        let mut out = coef.to_vec();
        for j in 0..self.scale.len() {
            out[j + 1] = coef[j + 1] / self.scale[j];
            out[0] -= coef[j + 1] * self.center[j] / self.scale[j];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub theta: Range<usize>,
    pub gamma: Option<Range<usize>>,
    pub phi: Range<usize>,
    pub log_lambda: Option<usize>,
    /// `log σ` (normal) or `log σ_NB` (negative binomial).
    pub log_sigma: Option<usize>,
    pub log_alpha: Option<usize>,
    pub log_rho: Option<usize>,
    pub beta: Option<Range<usize>>,
    pub kappa: Option<Range<usize>>,
    pub theta_star: Option<usize>,
    pub dim: usize,
}

struct Priors {
    theta: PriorSpec,
    gamma: PriorSpec,
    phi: PriorSpec,
    lambda: PriorSpec,
    sigma: PriorSpec,
    alpha: PriorSpec,
    rho: PriorSpec,
    theta_star: PriorSpec,
}

/// Assembled model; implements [`LogDensity`] over the unconstrained vector.
pub struct JointModel {
    spec: JointSpec,
    layout: Layout,
    priors: Priors,
    n_a: usize,
    n_r: usize,
    xq_c: Matrix,
    xq_a: Matrix,
    xq_r: Matrix,
    idx_a: Vec<usize>,
    delta: Vec<f64>,
    ws_r: Vec<f64>,
    log_wscale: f64,
    log_pr_a: Option<Vec<f64>>,
    log_pr_r: Option<Vec<f64>>,
    xm_a: Matrix,
    xm_r: Matrix,
    y_a: Vec<f64>,
    lgamma_y1: Vec<f64>,
    y_center: f64,
    y_scale: f64,
    log_t_a: Vec<f64>,
    log_t_r: Vec<f64>,
    basis: Option<LowRankBasis>,
    /// Location and scale mapping `u` onto the GP input axis.
    gp_center: f64,
    gp_scale: f64,
    lwp_scale: f64,
    q_std: Standardizer,
    m_std: Standardizer,
    init: Vec<f64>,
    evals: AtomicUsize,
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn lin(coef: &[f64], row: &[f64]) -> f64 {
    coef[0] + dot(&coef[1..], row)
}

fn add_scaled(g: &mut [f64], range: &Range<usize>, c: f64, row: &[f64]) {
    g[range.start] += c;
    for (gk, x) in g[range.start + 1..range.end].iter_mut().zip(row) {
        *gk += c * x;
    }
}

/// `√S(ω)` and `d ln √S / d ln ρ` for the Matérn-3/2 density.
fn spectral_coefs(basis: &LowRankBasis, alpha: f64, rho: f64) -> (Vec<f64>, Vec<f64>) {
    let a = 3.0 / (rho * rho);
    let pre = alpha * SQRT_12_SQRT3 * rho.powf(-1.5);
    basis
        .frequencies()
        .iter()
        .map(|w| {
            let den = a + w * w;
            (pre / den, -1.5 + 2.0 * a / den)
        })
        .unzip()
}

impl JointModel {
    pub fn assemble(sample: &CombinedSample, spec: JointSpec) -> Result<Self> {
        if sample.n_a() == 0 || sample.n_r() == 0 {
            return Err(Error::Validation("both samples must be nonempty".into()));
        }
        let nb = spec.family == OutcomeFamily::NegbinomLogOffset;
        let offsets = sample.offsets();
        let any_offset = sample.records().iter().any(|r| r.offset.is_some());
        if nb && offsets.is_none() {
            return Err(Error::Validation(
                "negative binomial outcome needs an exposure on every record".into(),
            ));
        }
        if !nb && any_offset {
            return Err(Error::Validation(
                "exposures are only used by the negative binomial family".into(),
            ));
        }
        let idx_a = sample.indices_a();
        let idx_r = sample.indices_r();

        let xq_raw = design(sample, &spec.qr_terms)?;
        let q_std = Standardizer::fit(&xq_raw);
        let xq_c = q_std.apply(&xq_raw);
        let xq_a = xq_c.select_rows(&idx_a);
        let xq_r = xq_c.select_rows(&idx_r);
        let xm_raw = design(sample, &spec.pm_terms)?;
        let m_std = Standardizer::fit(&xm_raw);
        let xm_c = m_std.apply(&xm_raw);
        let xm_a = xm_c.select_rows(&idx_a);
        let xm_r = xm_c.select_rows(&idx_r);

        let w = sample.weights_r();
        let wbar = mean(&w);
        let ws_r: Vec<f64> = w.iter().map(|v| v / wbar).collect();
        let known = if spec.use_known_ref {
            sample.known_ref_probs()
        } else {
            None
        };
        let (log_pr_a, log_pr_r) = match &known {
            Some(p) => (
                Some(idx_a.iter().map(|&i| p[i].ln()).collect()),
                Some(idx_r.iter().map(|&i| p[i].ln()).collect()),
            ),
            None => (None, None),
        };

        let y_raw = sample.outcomes_a();
        let (y_center, y_scale) = match spec.family {
            OutcomeFamily::Normal => {
                let s = pop_sd(&y_raw);
                (mean(&y_raw), if s > 0.0 { s } else { 1.0 })
            }
            _ => (0.0, 1.0),
        };
        match spec.family {
            OutcomeFamily::BernoulliLogit if y_raw.iter().any(|v| *v != 0.0 && *v != 1.0) => {
                return Err(Error::Validation("binary outcome must be 0 or 1".into()))
            }
            OutcomeFamily::NegbinomLogOffset
                if y_raw.iter().any(|v| *v < 0.0 || v.fract() != 0.0) =>
            {
                return Err(Error::Validation(
                    "count outcome must be a nonnegative integer".into(),
                ))
            }
            _ => {}
        }
        // snapping to a fixed grid keeps the sampler path identical under
        // changes of location or scale that perturb the last bits
        let y_a: Vec<f64> = match spec.family {
            OutcomeFamily::Normal => y_raw
                .iter()
                .map(|v| ((v - y_center) / y_scale / OUTCOME_GRID).round() * OUTCOME_GRID)
                .collect(),
            _ => y_raw.clone(),
        };
        let lgamma_y1 = y_a
            .iter()
            .map(|v| if nb { ln_gamma(v + 1.0) } else { 0.0 })
            .collect();
        let (log_t_a, log_t_r) = match &offsets {
            Some(t) if nb => (
                idx_a.iter().map(|&i| t[i].ln()).collect(),
                idx_r.iter().map(|&i| t[i].ln()).collect(),
            ),
            _ => (vec![0.0; idx_a.len()], vec![0.0; idx_r.len()]),
        };

        let pq = xq_c.cols() + 1;
        let pm = xm_c.cols() + 1;
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let theta = take(pm);
        let gamma = known.is_none().then(|| take(pq));
        let phi = take(pq);
        let log_lambda = known.is_none().then(|| take(1).start);
        let log_sigma = (spec.family != OutcomeFamily::BernoulliLogit).then(|| take(1).start);
        let (log_alpha, log_rho, beta, kappa, theta_star) = match spec.component {
            Component::Gp => (
                Some(take(1).start),
                Some(take(1).start),
                Some(take(spec.basis_size)),
                Some(take(2)),
                None,
            ),
            Component::Lwp => (None, None, None, None, Some(take(1).start)),
            Component::Linear => (None, None, None, None, None),
        };
        let layout = Layout {
            theta,
            gamma,
            phi,
            log_lambda,
            log_sigma,
            log_alpha,
            log_rho,
            beta,
            kappa,
            theta_star,
            dim: next,
        };
        let priors = Priors {
            theta: spec.prior("theta")?,
            gamma: spec.prior("gamma")?,
            phi: spec.prior("phi")?,
            lambda: spec.prior("lambda")?,
            sigma: if nb {
                spec.prior("nb_sigma")?
            } else {
                spec.prior("sigma")?
            },
            alpha: spec.prior("alpha")?,
            rho: spec.prior("rho")?,
            theta_star: spec.prior("theta_star").or_else(|_| spec.prior("theta"))?,
        };

        let mut model = Self {
            n_a: idx_a.len(),
            n_r: idx_r.len(),
            delta: sample.membership(),
            spec,
            layout,
            priors,
            xq_c,
            xq_a,
            xq_r,
            idx_a,
            ws_r,
            log_wscale: wbar.ln(),
            log_pr_a,
            log_pr_r,
            xm_a,
            xm_r,
            y_a,
            lgamma_y1,
            y_center,
            y_scale,
            log_t_a,
            log_t_r,
            basis: None,
            gp_center: 0.0,
            gp_scale: 1.0,
            lwp_scale: 1.0,
            q_std,
            m_std,
            init: Vec::new(),
            evals: AtomicUsize::new(0),
        };
        model.initialize()?;
        Ok(model)
    }

    /// Frequentist warm start, basis domain and LWP scale.
    fn initialize(&mut self) -> Result<()> {
        let l = self.layout.clone();
        let mut q = vec![0.0; l.dim];

        let mspec = GlmSpec::new(Family::BernoulliLogit).with_ridge(1e-6);
        if let Ok(f) = fit_glm(&mspec, &self.xq_c, &self.delta, None) {
            q[l.phi.clone()].copy_from_slice(&f.coefficients);
        }
        if let (Some(g), Some(ll)) = (l.gamma.clone(), l.log_lambda) {
            let wspec = GlmSpec::new(Family::GaussianLogmean).with_ridge(1e-6);
            match fit_glm(&wspec, &self.xq_r, &self.ws_r, None) {
                Ok(f) => {
                    q[g].copy_from_slice(&f.coefficients);
                    q[ll] = f.dispersion.unwrap_or(1.0).sqrt().max(1e-3).ln();
                }
                Err(_) => q[ll] = 0.0,
            }
        }

        let offset_a =
            (self.spec.family == OutcomeFamily::NegbinomLogOffset).then_some(&self.log_t_a[..]);
        let (ofam, osd) = match self.spec.family {
            OutcomeFamily::Normal => (Family::GaussianIdentity, true),
            OutcomeFamily::BernoulliLogit => (Family::BernoulliLogit, false),
            OutcomeFamily::NegbinomLogOffset => (Family::NegbinomLog, true),
        };
        let ospec = GlmSpec::new(ofam).with_ridge(1e-6);
        if let Ok(f) = fit_glm_offset(&ospec, &self.xm_a, &self.y_a, None, offset_a) {
            q[l.theta.clone()].copy_from_slice(&f.coefficients);
            if let (Some(s), true) = (l.log_sigma, osd) {
                let v = f.dispersion.unwrap_or(1.0);
                q[s] = match self.spec.family {
                    OutcomeFamily::Normal => v.sqrt().max(1e-3).ln(),
                    _ => v.clamp(1e-3, 1e3).ln(),
                };
            }
        }

        let u_c = self.u_all(&q);
        match self.spec.component {
            Component::Gp => {
                let sd = pop_sd(&u_c);
                self.gp_center = mean(&u_c);
                self.gp_scale = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
                let z: Vec<f64> = u_c.iter().map(|v| self.gp_input(*v)).collect();
                self.basis = Some(build_basis(
                    &z,
                    self.spec.basis_size,
                    self.spec.boundary_factor,
                )?);
            }
            Component::Lwp => {
                let u_a: Vec<f64> = self.idx_a.iter().map(|&i| u_c[i]).collect();
                let m = mean(&u_a.iter().map(|u| (-u).exp()).collect::<Vec<_>>());
                self.lwp_scale = if m.is_finite() && m > 0.0 {
                    1.0 / m
                } else {
                    1.0
                };
            }
            Component::Linear => {}
        }
        self.init = q;
        Ok(())
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn spec(&self) -> &JointSpec {
        &self.spec
    }

    pub fn basis(&self) -> Option<&LowRankBasis> {
        self.basis.as_ref()
    }

    pub fn initial_point(&self) -> &[f64] {
        &self.init
    }

    pub fn uses_known_ref(&self) -> bool {
        self.log_pr_a.is_some()
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    /// Number of density evaluations so far.
    /// Standardized GP input; the map is fixed at the warm start.
    fn gp_input(&self, u: f64) -> f64 {
        (u - self.gp_center) / self.gp_scale
    }

    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    /// `log π_A` for every pooled record at parameters `q`.
    pub fn u_all(&self, q: &[f64]) -> Vec<f64> {
        let phi = &q[self.layout.phi.clone()];
        let n_c = self.xq_c.rows();
        let mut a = 0;
        let mut r = 0;
        (0..n_c)
            .map(|i| {
                let row = self.xq_c.row(i);
                let lo = lin(phi, row);
                let is_a = self.delta[i] == 1.0;
                let u = match (&self.log_pr_a, &self.log_pr_r, &self.layout.gamma) {
                    (Some(pa), Some(pr), _) => lo + if is_a { pa[a] } else { pr[r] },
                    (_, _, Some(g)) => lo - lin(&q[g.clone()], row) - self.log_wscale,
                    _ => lo,
                };
                if is_a {
                    a += 1;
                } else {
                    r += 1;
                }
                u
            })
            .collect()
    }

    fn u_a(&self, q: &[f64], lin_phi_a: &[f64]) -> Vec<f64> {
        match (&self.log_pr_a, &self.layout.gamma) {
            (Some(pa), _) => lin_phi_a.iter().zip(pa).map(|(l, p)| l + p).collect(),
            (None, Some(g)) => {
                let gamma = &q[g.clone()];
                (0..self.n_a)
                    .map(|i| lin_phi_a[i] - lin(gamma, self.xq_a.row(i)) - self.log_wscale)
                    .collect()
            }
            _ => unreachable!("layout always has a weight block without known probabilities"),
        }
    }

    fn u_r(&self, q: &[f64]) -> Vec<f64> {
        let phi = &q[self.layout.phi.clone()];
        (0..self.n_r)
            .map(|i| {
                let row = self.xq_r.row(i);
                let lo = lin(phi, row);
                match (&self.log_pr_r, &self.layout.gamma) {
                    (Some(pr), _) => lo + pr[i],
                    (None, Some(g)) => lo - lin(&q[g.clone()], row) - self.log_wscale,
                    _ => lo,
                }
            })
            .collect()
    }

    /// Nonlinear term at each `u` on the standardized outcome scale.
    fn h_values(&self, q: &[f64], u: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        match self.spec.component {
            Component::Linear => vec![0.0; u.len()],
            Component::Lwp => {
                let ts = q[l.theta_star.unwrap()];
                u.iter().map(|v| ts * self.lwp_scale * (-v).exp()).collect()
            }
            Component::Gp => {
                let basis = self.basis.as_ref().unwrap();
                let (c, _) = spectral_coefs(
                    basis,
                    q[l.log_alpha.unwrap()].exp(),
                    q[l.log_rho.unwrap()].exp(),
                );
                let beta = &q[l.beta.clone().unwrap()];
                let kappa = &q[l.kappa.clone().unwrap()];
                let mut f = vec![0.0; basis.l];
                let mut df = vec![0.0; basis.l];
                u.iter()
                    .map(|&v| {
                        let v = self.gp_input(v);
                        basis.features_with_derivative(v, &mut f, &mut df);
                        let g = poly_features(v, self.spec.tau);
                        (0..basis.l).map(|j| c[j] * beta[j] * f[j]).sum::<f64>()
                            + kappa[0] * g[0]
                            + kappa[1] * g[1]
                    })
                    .collect()
            }
        }
    }

    fn positive_prior(prior: &PriorSpec, q: &[f64], idx: usize, g: &mut [f64]) -> f64 {
        let s = q[idx];
        let x = s.exp();
        if !(x > 0.0 && x.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let (lp, d) = prior.log_density(x);
        g[idx] += d * x + 1.0;
        lp + s
    }

    fn density(&self, q: &[f64], g: &mut [f64]) -> f64 {
        g.iter_mut().for_each(|v| *v = 0.0);
        let l = &self.layout;
        let mut lp = 0.0;

        for (pr, range) in [
            (&self.priors.theta, Some(l.theta.clone())),
            (&self.priors.gamma, l.gamma.clone()),
            (&self.priors.phi, Some(l.phi.clone())),
        ] {
            if let Some(range) = range {
                for k in range {
                    let (v, d) = pr.log_density(q[k]);
                    lp += v;
                    g[k] += d;
                }
            }
        }
        for (pr, idx) in [
            (&self.priors.lambda, l.log_lambda),
            (&self.priors.sigma, l.log_sigma),
            (&self.priors.alpha, l.log_alpha),
            (&self.priors.rho, l.log_rho),
        ] {
            if let Some(idx) = idx {
                lp += Self::positive_prior(pr, q, idx, g);
            }
        }
        for range in [l.beta.clone(), l.kappa.clone()].into_iter().flatten() {
            for k in range {
                lp -= 0.5 * q[k] * q[k];
                g[k] -= q[k];
            }
        }
        if let Some(k) = l.theta_star {
            let (v, d) = self.priors.theta_star.log_density(q[k]);
            lp += v;
            g[k] += d;
        }
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }

        // membership model on the pooled sample
        let phi = &q[l.phi.clone()];
        let mut lin_phi_a = Vec::with_capacity(self.n_a);
        for i in 0..self.xq_c.rows() {
            let row = self.xq_c.row(i);
            let eta = lin(phi, row);
            let d = self.delta[i];
            lp += d * eta - softplus(eta);
            add_scaled(g, &l.phi, d - logistic(eta), row);
            if d == 1.0 {
                lin_phi_a.push(eta);
            }
        }

        // reference-weight model
        if let (Some(gr), Some(ll)) = (&l.gamma, l.log_lambda) {
            let gamma = &q[gr.clone()];
            let lam = q[ll].exp();
            let inv2 = 1.0 / (lam * lam);
            for i in 0..self.n_r {
                let row = self.xq_r.row(i);
                let m = lin(gamma, row).exp();
                let r = self.ws_r[i] - m;
                lp += -q[ll] - 0.5 * r * r * inv2 - LN_SQRT_2PI;
                add_scaled(g, gr, r * m * inv2, row);
                g[ll] += -1.0 + r * r * inv2;
            }
        }

        // outcome model
        let u = self.u_a(q, &lin_phi_a);
        let theta = &q[l.theta.clone()];
        let sigma_s = l.log_sigma.map(|k| q[k]);
        let gp = match self.spec.component {
            Component::Gp => {
                let basis = self.basis.as_ref().unwrap();
                let (c, dlc) = spectral_coefs(
                    basis,
                    q[l.log_alpha.unwrap()].exp(),
                    q[l.log_rho.unwrap()].exp(),
                );
                Some((basis, c, dlc))
            }
            _ => None,
        };
        let lb = gp.as_ref().map_or(0, |(b, _, _)| b.l);
        let mut f = vec![0.0; lb];
        let mut df = vec![0.0; lb];
        for i in 0..self.n_a {
            let (h, dh_du) = match (&gp, self.spec.component) {
                (Some((basis, c, _)), _) => {
                    let z = self.gp_input(u[i]);
                    basis.features_with_derivative(z, &mut f, &mut df);
                    let beta = &q[l.beta.clone().unwrap()];
                    let kappa = &q[l.kappa.clone().unwrap()];
                    let pf = poly_features(z, self.spec.tau);
                    let pd = poly_features_du(z, self.spec.tau);
                    let mut h = kappa[0] * pf[0] + kappa[1] * pf[1];
                    let mut dh = kappa[0] * pd[0] + kappa[1] * pd[1];
                    for j in 0..lb {
                        h += c[j] * beta[j] * f[j];
                        dh += c[j] * beta[j] * df[j];
                    }
                    (h, dh / self.gp_scale)
                }
                (None, Component::Lwp) => {
                    let h = q[l.theta_star.unwrap()] * self.lwp_scale * (-u[i]).exp();
                    (h, -h)
                }
                _ => (0.0, 0.0),
            };
            let xm = self.xm_a.row(i);
            let eta = lin(theta, xm) + h + self.log_t_a[i];
            let y = self.y_a[i];
            let d_eta = match self.spec.family {
                OutcomeFamily::Normal => {
                    let s = sigma_s.unwrap();
                    let inv2 = (-2.0 * s).exp();
                    let r = y - eta;
                    lp += -s - 0.5 * r * r * inv2 - LN_SQRT_2PI;
                    g[l.log_sigma.unwrap()] += -1.0 + r * r * inv2;
                    r * inv2
                }
                OutcomeFamily::BernoulliLogit => {
                    lp += y * eta - softplus(eta);
                    y - logistic(eta)
                }
                OutcomeFamily::NegbinomLogOffset => {
                    let s = sigma_s.unwrap();
                    let size = (-s).exp();
                    let mu = eta.exp();
                    let log_den = (size + mu).ln();
                    lp += ln_gamma(y + size) - ln_gamma(size) - self.lgamma_y1[i]
                        + size * (size.ln() - log_den)
                        + y * (eta - log_den);
                    let d_size = digamma(y + size) - digamma(size) + size.ln() - log_den
                        + (mu - y) / (size + mu);
                    g[l.log_sigma.unwrap()] += -size * d_size;
                    size * (y - mu) / (size + mu)
                }
            };
            add_scaled(g, &l.theta, d_eta, xm);
            match (&gp, self.spec.component) {
                (Some((_, c, dlc)), _) => {
                    let beta_r = l.beta.clone().unwrap();
                    let kappa_r = l.kappa.clone().unwrap();
                    let pf = poly_features(self.gp_input(u[i]), self.spec.tau);
                    let mut d_alpha = 0.0;
                    let mut d_rho = 0.0;
                    for j in 0..lb {
                        let term = c[j] * f[j];
                        g[beta_r.start + j] += d_eta * term;
                        let tb = term * q[beta_r.start + j];
                        d_alpha += tb;
                        d_rho += tb * dlc[j];
                    }
                    g[kappa_r.start] += d_eta * pf[0];
                    g[kappa_r.start + 1] += d_eta * pf[1];
                    g[l.log_alpha.unwrap()] += d_eta * d_alpha;
                    g[l.log_rho.unwrap()] += d_eta * d_rho;
                }
                (None, Component::Lwp) => {
                    g[l.theta_star.unwrap()] += d_eta * self.lwp_scale * (-u[i]).exp();
                }
                _ => {}
            }
            if dh_du != 0.0 {
                let du = d_eta * dh_du;
                let xq = self.xq_a.row(i);
                add_scaled(g, &l.phi, du, xq);
                if let Some(gr) = &l.gamma {
                    add_scaled(g, gr, -du, xq);
                }
            }
        }
        if lp.is_finite() && g.iter().all(|v| v.is_finite()) {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Parameter names in the order of [`JointModel::natural`].
    pub fn parameter_names(&self) -> Vec<String> {
        let l = &self.layout;
        let mut names = Vec::with_capacity(l.dim);
        let coef_names = |prefix: &str, terms: &[Term], out: &mut Vec<String>| {
            out.push(format!("{prefix}[(intercept)]"));
            out.extend(terms.iter().map(|t| format!("{prefix}[{t}]")));
        };
        coef_names("theta", &self.spec.pm_terms, &mut names);
        if l.gamma.is_some() {
            coef_names("gamma", &self.spec.qr_terms, &mut names);
        }
        coef_names("phi", &self.spec.qr_terms, &mut names);
        if l.log_lambda.is_some() {
            names.push("lambda".into());
        }
        if l.log_sigma.is_some() {
            names.push(match self.spec.family {
                OutcomeFamily::NegbinomLogOffset => "nb_sigma".into(),
                _ => "sigma".into(),
            });
        }
        if let Some(b) = &l.beta {
            names.push("alpha".into());
            names.push("rho".into());
            names.extend((1..=b.len()).map(|j| format!("beta[{j}]")));
            names.push("kappa[1]".into());
            names.push("kappa[2]".into());
        }
        if l.theta_star.is_some() {
            names.push("theta_star".into());
        }
        names
    }

    /// Unconstrained vector → reported parameters on the original scales.
    pub fn natural(&self, q: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let mut out = Vec::with_capacity(l.dim);
        let mut theta = self.m_std.unscale(&q[l.theta.clone()]);
        if self.spec.family == OutcomeFamily::Normal {
            theta.iter_mut().for_each(|v| *v *= self.y_scale);
            theta[0] += self.y_center;
        }
        out.extend(theta);
        if let Some(g) = &l.gamma {
            let mut gamma = self.q_std.unscale(&q[g.clone()]);
            gamma[0] += self.log_wscale;
            out.extend(gamma);
        }
        out.extend(self.q_std.unscale(&q[l.phi.clone()]));
        if let Some(k) = l.log_lambda {
            out.push(q[k].exp() * self.log_wscale.exp());
        }
        if let Some(k) = l.log_sigma {
            out.push(
                q[k].exp()
                    * if self.spec.family == OutcomeFamily::Normal {
                        self.y_scale
                    } else {
                        1.0
                    },
            );
        }
        if let Some(b) = &l.beta {
            out.push(q[l.log_alpha.unwrap()].exp());
            out.push(q[l.log_rho.unwrap()].exp());
            out.extend_from_slice(&q[b.clone()]);
            out.extend_from_slice(&q[l.kappa.clone().unwrap()]);
        }
        if let Some(k) = l.theta_star {
            out.push(q[k]);
        }
        out
    }

    /// Predictive means on the original outcome scale for `S_A` and `S_R`
    /// units (exposures included).
    pub fn predictive_means(&self, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let theta = &q[l.theta.clone()];
        let u_c = self.u_all(q);
        let u_a: Vec<f64> = self.idx_a.iter().map(|&i| u_c[i]).collect();
        let u_r = self.u_r(q);
        let h_a = self.h_values(q, &u_a);
        let h_r = self.h_values(q, &u_r);
        let to_mean = |eta: f64| match self.spec.family {
            OutcomeFamily::Normal => self.y_center + self.y_scale * eta,
            OutcomeFamily::BernoulliLogit => logistic(eta),
            OutcomeFamily::NegbinomLogOffset => eta.exp(),
        };
        let m_a = (0..self.n_a)
            .map(|i| to_mean(lin(theta, self.xm_a.row(i)) + h_a[i] + self.log_t_a[i]))
            .collect();
        let m_r = (0..self.n_r)
            .map(|i| to_mean(lin(theta, self.xm_r.row(i)) + h_r[i] + self.log_t_r[i]))
            .collect();
        (m_a, m_r)
    }

    fn draw_outcome(&self, mean: f64, q: &[f64], rng: &mut crate::rng::Rng) -> f64 {
        match self.spec.family {
            OutcomeFamily::Normal => {
                let z: f64 = rng.sample(StandardNormal);
                mean + self.y_scale * q[self.layout.log_sigma.unwrap()].exp() * z
            }
            OutcomeFamily::BernoulliLogit => (rng.random::<f64>() < mean) as u8 as f64,
            OutcomeFamily::NegbinomLogOffset => {
                let size = (-q[self.layout.log_sigma.unwrap()]).exp();
                let lam = Gamma::new(size, mean / size)
                    .map(|d| d.sample(rng))
                    .unwrap_or(mean);
                if lam > 0.0 && lam.is_finite() {
                    Poisson::new(lam)
                        .map(|d| d.sample(rng))
                        .unwrap_or(lam.round())
                } else {
                    0.0
                }
            }
        }
    }
}

impl LogDensity for JointModel {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn log_density_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.density(q, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDiagnostics {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub accept_rate: f64,
    pub divergences: usize,
    pub step_sizes: Vec<f64>,
    pub max_rhat: f64,
    pub rhat: Vec<f64>,
    pub density_evaluations: usize,
}

/// Posterior draws with their predictive outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPosterior {
    pub names: Vec<String>,
    /// Natural-scale parameters, one row per draw.
    pub draws: Vec<Vec<f64>>,
    /// Predictions for `S_R` units (draw × unit), means or realizations
    /// per [`JointSpec::prediction`].
    pub y_rep_r: Vec<Vec<f64>>,
    /// Predictive means for `S_A` units (draw × unit).
    pub y_rep_a: Vec<Vec<f64>>,
    pub diagnostics: PosteriorDiagnostics,
}

impl JointPosterior {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(self.draws.iter().map(|d| d[k]).collect())
    }
}

/// Predictive draws for every posterior draw. Draw `m` uses its own RNG
/// stream, so the result does not depend on the thread pool.
#[allow(clippy::type_complexity)]
pub fn posterior_predict(
    model: &JointModel,
    draws: &[Vec<f64>],
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if draws.is_empty() {
        return Err(Error::Validation(
            "no posterior draws to predict from".into(),
        ));
    }
    let out: Vec<(Vec<f64>, Vec<f64>)> = draws
        .par_iter()
        .enumerate()
        .map(|(m, q)| {
            let mut rng = rng_for(seed, &[PREDICT_STREAM, m as u64]);
            let (mean_a, mean_r) = model.predictive_means(q);
            let rep_r = match model.spec.prediction {
                Prediction::Mean => mean_r,
                Prediction::Realized => mean_r
                    .iter()
                    .map(|&mu| model.draw_outcome(mu, q, &mut rng))
                    .collect(),
            };
            (rep_r, mean_a)
        })
        .collect();
    Ok(out.into_iter().unzip())
}

/// Samples the joint posterior and its predictive outcomes.
pub fn fit_joint(model: &JointModel, hmc: &HmcConfig) -> Result<(JointPosterior, HmcOutput)> {
    let out = run_hmc(model, model.initial_point(), hmc)?;
    let (y_rep_r, y_rep_a) = posterior_predict(model, &out.draws, hmc.seed)?;
    let posterior = JointPosterior {
        names: model.parameter_names(),
        draws: out.draws.iter().map(|q| model.natural(q)).collect(),
        y_rep_r,
        y_rep_a,
        diagnostics: PosteriorDiagnostics {
            chains: hmc.chains,
            draws_per_chain: hmc.draws,
            accept_rate: out.accept_rate(),
            divergences: out.divergences(),
            step_sizes: out.chains.iter().map(|c| c.step_size).collect(),
            max_rhat: out.max_rhat(),
            rhat: out.rhat.clone(),
            density_evaluations: model.evaluations(),
        },
    };
    Ok((posterior, out))
}

/// Kinds of prior a block accepts; used to validate user-supplied specs.
pub fn prior_is_positive(kind: &PriorKind) -> bool {
    matches!(
        kind,
        PriorKind::HalfStudentT { .. } | PriorKind::HalfCauchy { .. } | PriorKind::Gig { .. }
    )
}
