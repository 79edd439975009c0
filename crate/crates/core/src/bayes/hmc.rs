//! Static-trajectory Hamiltonian Monte Carlo.
//!
//! Each iteration integrates a jittered number of leapfrog steps and applies a
//! Metropolis correction. Warmup tunes the step size by dual averaging and a
//! diagonal or dense inverse metric over doubling windows (initial 15% and
//! terminal 10% of warmup are step-size only).

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, Rng};
use crate::{Error, Result};

/// Target log density over an unconstrained vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Returns `log p(q)` and writes `∇ log p(q)` into `grad`. Invalid points
    /// return `-inf`; the gradient is then ignored.
    fn log_density_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub warmup: usize,
    /// Post-warmup draws per chain.
    pub draws: usize,
    /// Nominal leapfrog steps per iteration.
    pub n_leapfrog: usize,
    /// Draw the step count uniformly from `[L/2, 3L/2]`.
    pub jitter_steps: bool,
    /// `None` runs the doubling heuristic at the start of warmup.
    pub init_step_size: Option<f64>,
    pub target_accept: f64,
    pub seed: u64,
    pub chains: usize,
    /// Energy error above which a transition counts as divergent.
    pub max_energy_error: f64,
    /// Half-width of the uniform perturbation applied to the initial point
    /// of each chain.
    pub init_jitter: f64,
    /// Start metric adaptation from the inverse diagonal curvature at the
    /// initial point instead of the identity.
    pub curvature_metric: bool,
    pub metric: MetricKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Diag,
    Dense,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            warmup: 500,
            draws: 500,
            n_leapfrog: 32,
            jitter_steps: true,
            init_step_size: None,
            target_accept: 0.8,
            seed: 0,
            chains: 2,
            max_energy_error: 1000.0,
            init_jitter: 0.05,
            curvature_metric: true,
            metric: MetricKind::Dense,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::Validation("HMC needs at least one draw".into()));
        }
        if self.chains == 0 {
            return Err(Error::Validation("HMC needs at least one chain".into()));
        }
        if self.n_leapfrog == 0 {
            return Err(Error::Validation(
                "HMC needs at least one leapfrog step".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Validation(
                "target acceptance must lie in (0, 1)".into(),
            ));
        }
        if let Some(e) = self.init_step_size {
            if !(e > 0.0) {
                return Err(Error::Validation(
                    "initial step size must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    /// Mean Metropolis acceptance probability over post-warmup iterations.
    pub accept_rate: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub sampling_leapfrog_steps: usize,
    pub sampling_gradient_evals: usize,
    pub total_gradient_evals: usize,
    /// `|ΔH|` for every post-warmup transition.
    pub energy_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcOutput {
    /// Post-warmup draws, chain 0 first.
    pub draws: Vec<Vec<f64>>,
    pub chains: Vec<ChainDiagnostics>,
    /// Split-R̂ per coordinate.
    pub rhat: Vec<f64>,
}

impl HmcOutput {
    pub fn divergences(&self) -> usize {
        self.chains.iter().map(|c| c.divergences).sum()
    }

    pub fn accept_rate(&self) -> f64 {
        self.chains.iter().map(|c| c.accept_rate).sum::<f64>() / self.chains.len() as f64
    }

    pub fn max_rhat(&self) -> f64 {
        self.rhat
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(1.0, f64::max)
    }
}

/// Runs `n_steps` leapfrog steps in place. `grad` must hold the gradient at
/// `q` on entry and holds it at the final `q` on exit. Returns the final log
/// density and the number of gradient evaluations (stops early on an
/// invalid point).
#[allow(clippy::too_many_arguments)]
pub fn leapfrog<M: LogDensity + ?Sized>(
    model: &M,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    inv_metric: &[f64],
    n_steps: usize,
) -> (f64, usize) {
    integrate(
        model,
        q,
        p,
        grad,
        eps,
        &Metric::Diag(inv_metric.to_vec()),
        n_steps,
    )
}

/// Inverse metric: momentum covariance is its inverse.
#[derive(Debug, Clone)]
enum Metric {
    Diag(Vec<f64>),
    /// Covariance `Σ` and its lower Cholesky factor.
    Dense {
        sigma: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
}

impl Metric {
    fn dense(sigma: DMatrix<f64>) -> Option<Self> {
        let chol = sigma.clone().cholesky()?.l();
        Some(Metric::Dense { sigma, chol })
    }

    fn velocity(&self, p: &[f64], out: &mut [f64]) {
        match self {
            Metric::Diag(m) => {
                for ((o, m), p) in out.iter_mut().zip(m).zip(p) {
                    *o = m * p;
                }
            }
            Metric::Dense { sigma, .. } => {
                let v = sigma * DVector::from_column_slice(p);
                out.copy_from_slice(v.as_slice());
            }
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        let mut v = vec![0.0; p.len()];
        self.velocity(p, &mut v);
        0.5 * p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
    }

    fn momentum(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            Metric::Diag(m) => m
                .iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    z / m.sqrt()
                })
                .collect(),
            Metric::Dense { chol, .. } => {
                let z = DVector::from_iterator(
                    chol.nrows(),
                    (0..chol.nrows()).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                // Σ = L Lᵀ, so p = L⁻ᵀ z has covariance Σ⁻¹
                chol.tr_solve_lower_triangular(&z)
                    .map_or_else(|| z.as_slice().to_vec(), |p| p.as_slice().to_vec())
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        match self {
            Metric::Diag(m) => m.clone(),
            Metric::Dense { sigma, .. } => sigma.diagonal().as_slice().to_vec(),
        }
    }
}

fn integrate<M: LogDensity + ?Sized>(
    model: &M,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    metric: &Metric,
    n_steps: usize,
) -> (f64, usize) {
    let mut lp = f64::NAN;
    let mut v = vec![0.0; q.len()];
    for (pi, g) in p.iter_mut().zip(grad.iter()) {
        *pi += 0.5 * eps * g;
    }
    for s in 0..n_steps {
        metric.velocity(p, &mut v);
        for (qi, vi) in q.iter_mut().zip(&v) {
            *qi += eps * vi;
        }
        lp = model.log_density_and_grad(q, grad);
        if !lp.is_finite() {
            return (f64::NEG_INFINITY, s + 1);
        }
        let w = if s + 1 == n_steps { 0.5 } else { 1.0 };
        for (pi, g) in p.iter_mut().zip(grad.iter()) {
            *pi += w * eps * g;
        }
    }
    (lp, n_steps)
}

struct DualAveraging {
    mu: f64,
    hbar: f64,
    log_eps_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            hbar: 0.0,
            log_eps_bar: 0.0,
            t: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.hbar = (1.0 - w) * self.hbar + w * (self.target - accept);
        let log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.hbar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Metric adaptation windows `[start, end)` within warmup.
fn adaptation_windows(warmup: usize) -> Vec<(usize, usize)> {
    if warmup < 20 {
        return Vec::new();
    }
    let init = warmup * 15 / 100;
    let term = warmup / 10;
    let slow_end = warmup - term;
    let mut out = Vec::new();
    let mut start = init;
    let mut size = 25.min(slow_end - init);
    while start < slow_end {
        let mut end = start + size;
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        out.push((start, end));
        start = end;
        size *= 2;
    }
    out
}

struct Chain<'a, M: LogDensity + ?Sized> {
    model: &'a M,
    rng: Rng,
    q: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
    metric: Metric,
    evals: usize,
}

struct Transition {
    accept_prob: f64,
    divergent: bool,
    energy_error: f64,
    steps: usize,
    evals: usize,
}

impl<M: LogDensity + ?Sized> Chain<'_, M> {
    fn momentum(&mut self) -> Vec<f64> {
        self.metric.momentum(&mut self.rng)
    }

    fn transition(&mut self, eps: f64, steps: usize, max_err: f64) -> Transition {
        let mut p = self.momentum();
        let h0 = -self.lp + self.metric.kinetic(&p);
        let mut q = self.q.clone();
        let mut grad = self.grad.clone();
        let (lp, evals) = integrate(
            self.model,
            &mut q,
            &mut p,
            &mut grad,
            eps,
            &self.metric,
            steps,
        );
        self.evals += evals;
        let h1 = -lp + self.metric.kinetic(&p);
        let dh = h1 - h0;
        let divergent = !dh.is_finite() || dh > max_err;
        let accept_prob = if divergent { 0.0 } else { (-dh).exp().min(1.0) };
        let u: f64 = self.rng.random();
        if u < accept_prob {
            self.q = q;
            self.grad = grad;
            self.lp = lp;
        }
        Transition {
            accept_prob,
            divergent,
            energy_error: if dh.is_finite() {
                dh.abs()
            } else {
                f64::INFINITY
            },
            steps: evals,
            evals,
        }
    }

    /// Doubles or halves `eps` until a single step crosses acceptance 1/2.
    fn reasonable_step(&mut self, mut eps: f64) -> f64 {
        let trial = |chain: &mut Self, eps: f64| -> f64 {
            let mut p = chain.momentum();
            let h0 = -chain.lp + chain.metric.kinetic(&p);
            let mut q = chain.q.clone();
            let mut g = chain.grad.clone();
            let (lp, n) = integrate(chain.model, &mut q, &mut p, &mut g, eps, &chain.metric, 1);
            chain.evals += n;
            let dh = -lp + chain.metric.kinetic(&p) - h0;
            if dh.is_finite() {
                (-dh).min(0.0)
            } else {
                f64::NEG_INFINITY
            }
        };
        let log_half = 0.5f64.ln();
        let first = trial(self, eps);
        let dir = if first > log_half { 1.0 } else { -1.0 };
        for _ in 0..60 {
            let la = trial(self, eps);
            if (dir > 0.0 && la <= log_half) || (dir < 0.0 && la > log_half) {
                break;
            }
            eps *= 2f64.powf(dir);
            if !(1e-10..=1e4).contains(&eps) {
                break;
            }
        }
        eps.clamp(1e-10, 1e4)
    }
}

/// `min(1, 1 / -∂²log p/∂q_k²)` by central differences of the gradient;
/// coordinates with non-positive or non-finite curvature keep unit scale.
fn curvature_inv_metric<M: LogDensity + ?Sized>(model: &M, q: &[f64]) -> (Vec<f64>, usize) {
    let dim = q.len();
    let mut x = q.to_vec();
    let (mut gp, mut gm) = (vec![0.0; dim], vec![0.0; dim]);
    let mut out = vec![1.0; dim];
    for k in 0..dim {
        let h = 1e-4 * (1.0 + q[k].abs());
        x[k] = q[k] + h;
        let lp = model.log_density_and_grad(&x, &mut gp);
        x[k] = q[k] - h;
        let lm = model.log_density_and_grad(&x, &mut gm);
        x[k] = q[k];
        let curv = -(gp[k] - gm[k]) / (2.0 * h);
        if lp.is_finite() && lm.is_finite() && curv.is_finite() && curv > 0.0 {
            out[k] = (1.0 / curv).clamp(1e-10, 1.0);
        }
    }
    (out, 2 * dim)
}

/// Metric from the draws of one adaptation window. The covariance is shrunk
/// toward its own diagonal; coordinates that did not move keep the previous
/// scale.
fn window_metric(window: &[Vec<f64>], prev: &Metric, kind: MetricKind) -> Metric {
    let n = window.len();
    let prev_diag = prev.diagonal();
    if n < 2 {
        return prev.clone();
    }
    let dim = prev_diag.len();
    let nf = n as f64;
    let mut mu = vec![0.0; dim];
    for q in window {
        for (m, v) in mu.iter_mut().zip(q) {
            *m += v / nf;
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for q in window {
        let d = DVector::from_iterator(dim, q.iter().zip(&mu).map(|(v, m)| v - m));
        cov.ger(1.0 / (nf - 1.0), &d, &d, 1.0);
    }
    let stuck: Vec<bool> = (0..dim)
        .map(|k| !(cov[(k, k)] > 1e-14 * (1.0 + mu[k].abs())))
        .collect();
    let diag: Vec<f64> = (0..dim)
        .map(|k| if stuck[k] { prev_diag[k] } else { cov[(k, k)] })
        .collect();
    if kind == MetricKind::Diag {
        return Metric::Diag(diag);
    }
    let shrink = 5.0 / (nf + 5.0);
    let mut sigma = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            sigma[(i, j)] = if i == j {
                diag[i]
            } else if stuck[i] || stuck[j] {
                0.0
            } else {
                (1.0 - shrink) * cov[(i, j)]
            };
        }
    }
    Metric::dense(sigma).unwrap_or(Metric::Diag(diag))
}

struct ChainResult {
    draws: Vec<Vec<f64>>,
    diag: ChainDiagnostics,
}

fn run_chain<M: LogDensity + ?Sized>(
    model: &M,
    init: &[f64],
    cfg: &HmcConfig,
    chain: usize,
) -> Result<ChainResult> {
    let dim = model.dim();
    let mut rng = rng_for(cfg.seed, &[chain as u64]);
    let mut grad = vec![0.0; dim];
    let (scale, mut evals) = if cfg.curvature_metric {
        curvature_inv_metric(model, init)
    } else {
        (vec![1.0; dim], 0)
    };
    // jitter each coordinate in units of its curvature scale
    let mut q = init.to_vec();
    let mut lp = f64::NEG_INFINITY;
    for attempt in 0..20 {
        let width = cfg.init_jitter / (1u32 << attempt.min(10)) as f64;
        q = init
            .iter()
            .zip(&scale)
            .map(|(v, m)| {
                v + if width > 0.0 {
                    m.sqrt() * rng.random_range(-width..=width)
                } else {
                    0.0
                }
            })
            .collect();
        lp = model.log_density_and_grad(&q, &mut grad);
        evals += 1;
        if lp.is_finite() {
            break;
        }
    }
    if !lp.is_finite() {
        return Err(Error::Sampler(format!(
            "chain {chain}: log density is not finite at the initial point"
        )));
    }
    let mut st = Chain {
        model,
        rng,
        q,
        grad,
        lp,
        metric: Metric::Diag(scale),
        evals,
    };
    let mut eps = match cfg.init_step_size {
        Some(e) => e,
        None => st.reasonable_step(0.1),
    };
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let windows = adaptation_windows(cfg.warmup);
    let mut window_idx = 0;
    let mut window: Vec<Vec<f64>> = Vec::new();

    let steps_for = |rng: &mut Rng| -> usize {
        let l = cfg.n_leapfrog;
        if cfg.jitter_steps && l >= 2 {
            rng.random_range(l / 2..=l + l / 2).max(1)
        } else {
            l
        }
    };

    let mut warmup_div = 0;
    for it in 0..cfg.warmup {
        let steps = steps_for(&mut st.rng);
        let tr = st.transition(eps, steps, cfg.max_energy_error);
        warmup_div += tr.divergent as usize;
        eps = da.update(tr.accept_prob);

        if let Some(&(start, end)) = windows.get(window_idx) {
            if it >= start && it < end {
                window.push(st.q.clone());
            }
            if it + 1 == end {
                st.metric = window_metric(&window, &st.metric, cfg.metric);
                window.clear();
                window_idx += 1;
                eps = st.reasonable_step(eps);
                da = DualAveraging::new(eps, cfg.target_accept);
            }
        }
    }
    if cfg.warmup > 0 {
        if warmup_div == cfg.warmup {
            return Err(Error::Sampler(format!(
                "chain {chain}: every warmup transition diverged (step size {eps:.3e})"
            )));
        }
        eps = da.final_step();
    }

    let mut draws = Vec::with_capacity(cfg.draws);
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    let mut steps_total = 0;
    let evals_before = st.evals;
    let mut energy_errors = Vec::with_capacity(cfg.draws);
    for _ in 0..cfg.draws {
        let steps = steps_for(&mut st.rng);
        let tr = st.transition(eps, steps, cfg.max_energy_error);
        accept_sum += tr.accept_prob;
        divergences += tr.divergent as usize;
        steps_total += tr.steps;
        debug_assert!(tr.evals == tr.steps);
        energy_errors.push(tr.energy_error);
        draws.push(st.q.clone());
    }
    Ok(ChainResult {
        draws,
        diag: ChainDiagnostics {
            step_size: eps,
            inv_metric: st.metric.diagonal(),
            accept_rate: accept_sum / cfg.draws as f64,
            divergences,
            warmup_divergences: warmup_div,
            sampling_leapfrog_steps: steps_total,
            sampling_gradient_evals: st.evals - evals_before,
            total_gradient_evals: st.evals,
            energy_errors,
        },
    })
}

/// Runs `cfg.chains` chains in parallel from `init`. Chain `c` uses the RNG
/// stream derived from `(seed, c)`, so output does not depend on the thread
/// pool.
pub fn run_hmc<M: LogDensity + ?Sized>(
    model: &M,
    init: &[f64],
    cfg: &HmcConfig,
) -> Result<HmcOutput> {
    cfg.validate()?;
    if init.len() != model.dim() {
        return Err(Error::Dimension(format!(
            "initial point has length {}, model dimension is {}",
            init.len(),
            model.dim()
        )));
    }
    let results: Vec<Result<ChainResult>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(model, init, cfg, c))
        .collect();
    let mut draws = Vec::with_capacity(cfg.chains * cfg.draws);
    let mut chains = Vec::with_capacity(cfg.chains);
    let mut per_chain = Vec::with_capacity(cfg.chains);
    for r in results {
        let r = r?;
        per_chain.push(r.draws.clone());
        draws.extend(r.draws);
        chains.push(r.diag);
    }
    let rhat = split_rhat(&per_chain);
    Ok(HmcOutput {
        draws,
        chains,
        rhat,
    })
}

/// Split-R̂ for each coordinate; `NaN` when chains are too short.
pub fn split_rhat(chains: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let dim = chains
        .first()
        .and_then(|c| c.first())
        .map_or(0, |d| d.len());
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let half = n / 2;
    if half < 2 {
        return vec![f64::NAN; dim];
    }
    (0..dim)
        .map(|k| {
            let mut seqs: Vec<Vec<f64>> = Vec::new();
            for c in chains {
                seqs.push(c[..half].iter().map(|d| d[k]).collect());
                seqs.push(c[n - half..n].iter().map(|d| d[k]).collect());
            }
            let m = half as f64;
            let means: Vec<f64> = seqs.iter().map(|s| crate::linalg::mean(s)).collect();
            let w =
                seqs.iter().map(|s| crate::linalg::variance(s)).sum::<f64>() / seqs.len() as f64;
            let b = m * crate::linalg::variance(&means);
            if !(w > 0.0) {
                return if b > 0.0 { f64::INFINITY } else { 1.0 };
            }
            (((m - 1.0) / m * w + b / m) / w).sqrt()
        })
        .collect()
}
