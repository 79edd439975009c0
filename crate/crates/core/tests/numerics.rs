#![allow(clippy::needless_range_loop)]

use gppp_core::bayes::dirichlet::{sample_dirichlet_posterior, sample_multinomial, Conjugacy};
use gppp_core::bayes::hmc::{leapfrog, run_hmc, HmcConfig, LogDensity};
use gppp_core::bayes::priors::student_t;
use gppp_core::data::strata_from_weights;
use gppp_core::fpbb::{draw_polya, expand_predictions};
use gppp_core::glm::{fit_glm, glm_score, Family, GlmSpec};
use gppp_core::gp::{
    build_basis, kernel_gram, kernel_smoother_weights, matern_gram, spectral_density, KernelParams,
    LowRankBasis,
};
use gppp_core::linalg::{mean, sd, Matrix};
use gppp_core::rng::rng_for;
use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

fn min_eigenvalue(m: &Matrix) -> f64 {
    let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    d.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn trace(m: &Matrix) -> f64 {
    (0..m.rows()).map(|i| m.get(i, i)).sum()
}

#[test]
fn kernel_gram_is_symmetric_psd() {
    let mut rng = rng_for(11, &[]);
    for _ in 0..20 {
        let n = rng.random_range(2..40);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let p =
            KernelParams::new(rng.random_range(0.1..3.0), rng.random_range(0.1..3.0), 1.0).unwrap();
        let g = kernel_gram(&u, &p);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(g.get(i, j), g.get(j, i));
            }
        }
        assert!(min_eigenvalue(&g) >= -1e-8 * trace(&g));
        let m = matern_gram(&u, p.alpha, p.rho);
        assert!(min_eigenvalue(&m) >= -1e-8 * trace(&m));
    }
}

#[test]
fn spectral_density_decreasing() {
    for rho in [0.2, 1.0, 3.0] {
        let mut prev = f64::INFINITY;
        for k in 0..200 {
            let s = spectral_density(k as f64 * 0.1, 1.3, rho);
            assert!(s >= 0.0 && s <= prev);
            prev = s;
        }
    }
}

fn central_frobenius_error(basis: &LowRankBasis, u: &[f64], alpha: f64, rho: f64) -> f64 {
    let exact = matern_gram(u, alpha, rho);
    let approx = basis.approx_gram(u, alpha, rho);
    let n = u.len();
    let (lo, hi) = (n / 10, n - n / 10);
    let (mut num, mut den) = (0.0, 0.0);
    for i in lo..hi {
        for j in lo..hi {
            num += (exact.get(i, j) - approx.get(i, j)).powi(2);
            den += exact.get(i, j).powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn low_rank_gram_within_five_percent() {
    // length-scale an eighth of the input range
    let u: Vec<f64> = (0..40).map(|i| -2.0 + 4.0 * i as f64 / 39.0).collect();
    let basis = build_basis(&u, 10, 1.25).unwrap();
    let err = central_frobenius_error(&basis, &u, 1.0, 0.5);
    assert!(err <= 0.05, "relative Frobenius error {err}");
}

#[test]
fn long_length_scales_are_boundary_limited() {
    // at ρ = range/2 the Dirichlet boundary, not the rank, sets the error
    let u: Vec<f64> = (0..40).map(|i| -2.0 + 4.0 * i as f64 / 39.0).collect();
    let errs: Vec<f64> = [10, 20, 40]
        .iter()
        .map(|&l| central_frobenius_error(&build_basis(&u, l, 1.25).unwrap(), &u, 1.0, 2.0))
        .collect();
    assert!(errs[0] > 0.05);
    assert!((errs[0] - errs[2]).abs() < 1e-3, "{errs:?}");
    let wide = build_basis(&u, 40, 4.0).unwrap();
    assert!(central_frobenius_error(&wide, &u, 1.0, 2.0) < errs[0] / 2.0);
}

#[test]
fn low_rank_error_shrinks_with_rank() {
    let u: Vec<f64> = (0..40).map(|i| -2.0 + 4.0 * i as f64 / 39.0).collect();
    let mut prev = f64::INFINITY;
    for l in [2, 4, 8, 16] {
        let basis = build_basis(&u, l, 1.25).unwrap();
        let err = central_frobenius_error(&basis, &u, 1.0, 1.0);
        assert!(err <= prev + 1e-12, "l={l}: {err} > {prev}");
        prev = err;
    }
}

#[test]
fn basis_functions_orthonormal() {
    let basis = LowRankBasis::new(6, 1.25, 0.3, 2.0).unwrap();
    let n = 20000;
    let h = 2.0 * 2.0 / n as f64;
    for j in 1..=6 {
        for k in 1..=6 {
            let ip: f64 = (0..n)
                .map(|i| {
                    let u = 0.3 - 2.0 + (i as f64 + 0.5) * h;
                    basis.eigenfunction(j, u) * basis.eigenfunction(k, u) * h
                })
                .sum();
            let want = if j == k { 1.0 } else { 0.0 };
            assert!((ip - want).abs() < 1e-6, "<{j},{k}> = {ip}");
        }
    }
}

#[test]
fn smoother_rows_sum_to_one() {
    let mut rng = rng_for(12, &[]);
    let p = KernelParams::new(1.0, 0.7, 1.0).unwrap();
    let t: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..3.0)).collect();
    let s: Vec<f64> = (0..17).map(|_| rng.random_range(0.1..3.0)).collect();
    let w = kernel_smoother_weights(&t, &s, &p).unwrap();
    for i in 0..w.rows() {
        assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

struct Quadratic {
    precision: [[f64; 2]; 2],
}

impl LogDensity for Quadratic {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_and_grad(&self, q: &[f64], g: &mut [f64]) -> f64 {
        let p = &self.precision;
        let a = [
            p[0][0] * q[0] + p[0][1] * q[1],
            p[1][0] * q[0] + p[1][1] * q[1],
        ];
        g[0] = -a[0];
        g[1] = -a[1];
        -0.5 * (q[0] * a[0] + q[1] * a[1])
    }
}

fn correlated() -> (Quadratic, [[f64; 2]; 2]) {
    let cov = [[1.0, 0.6], [0.6, 2.0]];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let precision = [
        [cov[1][1] / det, -cov[0][1] / det],
        [-cov[1][0] / det, cov[0][0] / det],
    ];
    (Quadratic { precision }, cov)
}

#[test]
fn leapfrog_is_reversible() {
    let (m, _) = correlated();
    let q0 = vec![0.7, -1.2];
    let p0 = vec![0.3, 0.9];
    let metric = [1.0, 0.5];
    let mut q = q0.clone();
    let mut p = p0.clone();
    let mut g = vec![0.0; 2];
    m.log_density_and_grad(&q, &mut g);
    leapfrog(&m, &mut q, &mut p, &mut g, 0.1, &metric, 50);
    p.iter_mut().for_each(|v| *v = -*v);
    leapfrog(&m, &mut q, &mut p, &mut g, 0.1, &metric, 50);
    for k in 0..2 {
        assert!((q[k] - q0[k]).abs() < 1e-8);
        assert!((-p[k] - p0[k]).abs() < 1e-8);
    }
}

#[test]
fn leapfrog_preserves_volume() {
    // the Jacobian of one trajectory has unit determinant
    let (m, _) = correlated();
    let metric = [1.0, 1.0];
    let flow = |z: [f64; 4]| {
        let mut q = vec![z[0], z[1]];
        let mut p = vec![z[2], z[3]];
        let mut g = vec![0.0; 2];
        m.log_density_and_grad(&q, &mut g);
        leapfrog(&m, &mut q, &mut p, &mut g, 0.2, &metric, 10);
        [q[0], q[1], p[0], p[1]]
    };
    let z0 = [0.4, -0.3, 1.1, 0.2];
    let h = 1e-6;
    let mut jac = DMatrix::<f64>::zeros(4, 4);
    for c in 0..4 {
        let mut zp = z0;
        zp[c] += h;
        let mut zm = z0;
        zm[c] -= h;
        let (fp, fm) = (flow(zp), flow(zm));
        for r in 0..4 {
            jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    assert!((jac.determinant() - 1.0).abs() < 1e-6);
}

#[test]
fn hmc_recovers_correlated_gaussian() {
    let (m, cov) = correlated();
    let cfg = HmcConfig {
        warmup: 500,
        draws: 2000,
        seed: 5,
        ..HmcConfig::default()
    };
    let out = run_hmc(&m, &[0.0, 0.0], &cfg).unwrap();
    let x: Vec<f64> = out.draws.iter().map(|d| d[0]).collect();
    let y: Vec<f64> = out.draws.iter().map(|d| d[1]).collect();
    let (mx, my) = (mean(&x), mean(&y));
    let n = x.len() as f64;
    let cxy = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - 1.0);
    let est = [[sd(&x).powi(2), cxy], [cxy, sd(&y).powi(2)]];
    for i in 0..2 {
        for j in 0..2 {
            assert!(
                (est[i][j] - cov[i][j]).abs() <= 0.2 * cov[i][j].abs(),
                "{est:?}"
            );
        }
    }
    let mut e: Vec<f64> = out
        .chains
        .iter()
        .flat_map(|c| c.energy_errors.clone())
        .collect();
    e.sort_by(f64::total_cmp);
    assert!(
        e[e.len() / 2] < 0.2,
        "median energy error {}",
        e[e.len() / 2]
    );
}

#[test]
fn student_t3_log_density_at_zero() {
    let (lp, g) = student_t(0.0, 3.0, 0.0, 1.0);
    let want = ln_gamma(2.0) - ln_gamma(1.5) - 0.5 * (3.0 * std::f64::consts::PI).ln();
    assert!((lp - want).abs() < 1e-12, "{lp} vs {want}");
    assert_eq!(g, 0.0);
}

#[test]
fn dirichlet_posterior_moments() {
    let mut rng = rng_for(21, &[]);
    let counts = [3usize, 7];
    let alpha = [1.0, 1.0];
    let draws: Vec<Vec<f64>> = (0..100_000)
        .map(|_| sample_dirichlet_posterior(&counts, &alpha, Conjugacy::Printed, &mut rng).unwrap())
        .collect();
    // Dirichlet(3, 7): mean 0.3, variance 0.3·0.7/11
    let x: Vec<f64> = draws.iter().map(|d| d[0]).collect();
    let m = mean(&x);
    let v = sd(&x).powi(2);
    assert!((m - 0.3).abs() <= 0.01 * 0.3, "mean {m}");
    assert!(
        (v - 0.21 / 11.0).abs() <= 0.01 * (0.21 / 11.0) * 3.0,
        "variance {v}"
    );
    let x2: Vec<f64> = draws.iter().map(|d| d[1]).collect();
    assert!((mean(&x2) - 0.7).abs() <= 0.01 * 0.7);

    let std: Vec<f64> = (0..100_000)
        .map(|_| {
            sample_dirichlet_posterior(&counts, &alpha, Conjugacy::Standard, &mut rng).unwrap()[0]
        })
        .collect();
    assert!((mean(&std) - 4.0 / 12.0).abs() <= 0.01 * 4.0 / 12.0);
}

#[test]
fn symmetric_counts_give_exchangeable_marginals() {
    let mut rng = rng_for(22, &[]);
    let (mut a, mut b): (Vec<f64>, Vec<f64>) = (0..100_000)
        .map(|_| {
            let d = sample_dirichlet_posterior(&[5, 5], &[1.0, 1.0], Conjugacy::Printed, &mut rng)
                .unwrap();
            (d[0], d[1])
        })
        .unzip();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let ks = (0..=100)
        .map(|k| {
            let t = k as f64 / 100.0;
            let fa = a.partition_point(|v| *v <= t) as f64 / a.len() as f64;
            let fb = b.partition_point(|v| *v <= t) as f64 / b.len() as f64;
            (fa - fb).abs()
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "{ks}");
}

#[test]
fn polya_two_stratum_oracle() {
    // n = (10, 10), π = (0.1, 0.5), N = 1000: weights 10 and 2 rescale to π exactly
    let weights: Vec<f64> = [vec![10.0; 10], vec![2.0; 10]].concat();
    let n_total = 1000;
    let strata = strata_from_weights(&weights, 120, 0.0).unwrap();
    assert_eq!(strata.pis(), vec![0.5, 0.1]);
    let (j_low, _) = (0, 1);
    let polya = draw_polya(
        &strata,
        n_total,
        100_000,
        &[1.0, 1.0],
        Conjugacy::Printed,
        3,
    )
    .unwrap();
    let got = mean(
        &polya
            .n_draws
            .iter()
            .map(|r| r[j_low] as f64)
            .collect::<Vec<_>>(),
    );

    // direct two-stage Monte Carlo: ξ ~ Dirichlet(10, 10), share of stratum
    // with π = 0.5 among the non-sampled is ξ(1/0.5 − 1) / (…)
    let mut rng = rng_for(99, &[]);
    let g = Gamma::new(10.0, 1.0).unwrap();
    let oracle: f64 = (0..100_000)
        .map(|_| {
            let (a, b) = (g.sample(&mut rng), g.sample(&mut rng));
            let xi = a / (a + b);
            let share = xi * 1.0 / (xi * 1.0 + (1.0 - xi) * 9.0);
            10.0 + (n_total - 20) as f64 * share
        })
        .sum::<f64>()
        / 100_000.0;
    assert!((got - oracle).abs() <= 0.005 * oracle, "{got} vs {oracle}");
}

#[test]
fn polya_rows_sum_to_population() {
    let mut rng = rng_for(23, &[]);
    for _ in 0..20 {
        let n_r = rng.random_range(3..40);
        let w: Vec<f64> = (0..n_r)
            .map(|_| (rng.random_range(1..6) * 10) as f64)
            .collect();
        let total: f64 = w.iter().sum();
        let n = total.round() as usize + rng.random_range(0..500);
        let strata = strata_from_weights(&w, n, 0.0).unwrap();
        let p = draw_polya(
            &strata,
            n,
            50,
            &vec![1.0; strata.len()],
            Conjugacy::Standard,
            rng.random(),
        )
        .unwrap();
        for row in &p.n_draws {
            assert_eq!(row.iter().sum::<u64>(), n as u64);
            for (nj, c) in row.iter().zip(strata.counts()) {
                assert!(*nj >= c as u64);
            }
        }
    }
}

#[test]
fn polya_equal_probabilities_follow_sample_shares() {
    let weights: Vec<f64> = [vec![5.0; 6], vec![5.000_000_1; 14]].concat();
    let strata = strata_from_weights(&weights, 100_000, 0.0).unwrap();
    assert_eq!(strata.len(), 2);
    let p = draw_polya(
        &strata,
        100_000,
        100_000,
        &[1.0, 1.0],
        Conjugacy::Standard,
        8,
    )
    .unwrap();
    let share = mean(
        &p.n_draws
            .iter()
            .map(|r| r[0] as f64 / 100_000.0)
            .collect::<Vec<_>>(),
    );
    // Standard conjugacy: E[ξ₁] = (6 + 1) / 22
    assert!((share - 7.0 / 22.0).abs() <= 0.02 * 7.0 / 22.0, "{share}");
}

#[test]
fn expansion_matches_double_loop_and_is_linear() {
    let mut rng = rng_for(24, &[]);
    let weights = [3.0, 5.0, 3.0, 9.0, 5.0, 3.0, 9.0, 9.0, 5.0];
    let strata = strata_from_weights(&weights, 200, 0.0).unwrap();
    assert_eq!(strata.len(), 3);
    let polya = draw_polya(&strata, 200, 7, &[1.0; 3], Conjugacy::Printed, 4).unwrap();
    let y: Vec<Vec<f64>> = (0..7)
        .map(|_| (0..9).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let z: Vec<Vec<f64>> = (0..7)
        .map(|_| (0..9).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let ey = expand_predictions(&polya, &strata, &y).unwrap();
    let counts = strata.counts();
    for m in 0..7 {
        let mut brute = 0.0;
        for j in 0..strata.len() {
            for i in 0..9 {
                if strata.stratum_of[i] == j {
                    brute += polya.n_draws[m][j] as f64 / counts[j] as f64 * y[m][i];
                }
            }
        }
        assert!((brute - ey[m]).abs() < 1e-10);
    }
    let (a, b) = (1.7, -0.4);
    let mix: Vec<Vec<f64>> = y
        .iter()
        .zip(&z)
        .map(|(u, v)| u.iter().zip(v).map(|(p, q)| a * p + b * q).collect())
        .collect();
    let ez = expand_predictions(&polya, &strata, &z).unwrap();
    let emix = expand_predictions(&polya, &strata, &mix).unwrap();
    for m in 0..7 {
        assert!((emix[m] - (a * ey[m] + b * ez[m])).abs() < 1e-10);
    }
    let ones = vec![vec![1.0; 9]; 7];
    for t in expand_predictions(&polya, &strata, &ones).unwrap() {
        assert!((t - 200.0).abs() < 1e-9);
    }
}

#[test]
fn multinomial_matches_expected_counts() {
    let mut rng = rng_for(25, &[]);
    let probs = [0.2, 0.5, 0.3];
    let mut acc = [0.0; 3];
    for _ in 0..20_000 {
        let k = sample_multinomial(100, &probs, &mut rng).unwrap();
        assert_eq!(k.iter().sum::<u64>(), 100);
        for j in 0..3 {
            acc[j] += k[j] as f64 / 20_000.0;
        }
    }
    for j in 0..3 {
        assert!((acc[j] - 100.0 * probs[j]).abs() < 0.2);
    }
}

/// Log-likelihood and gradient of the logistic model, written out directly.
fn logit_loglik(beta: &[f64], x: &[[f64; 3]], y: &[f64]) -> (f64, [f64; 3]) {
    let mut ll = 0.0;
    let mut g = [0.0; 3];
    for (row, &yi) in x.iter().zip(y) {
        let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        ll += yi * eta - (1.0 + eta.exp()).ln();
        let p = 1.0 / (1.0 + (-eta).exp());
        for k in 0..3 {
            g[k] += (yi - p) * row[k];
        }
    }
    (ll, g)
}

/// Newton iterations with a finite-difference Hessian of the hand-written
/// gradient, run to machine precision.
fn oracle_maximize(x: &[[f64; 3]], y: &[f64]) -> [f64; 3] {
    let mut b = [0.0; 3];
    for _ in 0..100 {
        let (_, g) = logit_loglik(&b, x, y);
        if g.iter().all(|v| v.abs() < 1e-13) {
            break;
        }
        let h = 1e-6;
        let mut hess = DMatrix::<f64>::zeros(3, 3);
        for c in 0..3 {
            let mut bp = b;
            bp[c] += h;
            let mut bm = b;
            bm[c] -= h;
            let (gp, gm) = (logit_loglik(&bp, x, y).1, logit_loglik(&bm, x, y).1);
            for r in 0..3 {
                hess[(r, c)] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        let step = (-hess)
            .lu()
            .solve(&nalgebra::DVector::from_row_slice(&g))
            .unwrap();
        for k in 0..3 {
            b[k] += step[k];
        }
    }
    b
}

#[test]
fn logistic_fit_matches_independent_optimizer() {
    let mut rng = rng_for(26, &[]);
    let mut rows = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..50 {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.random_range(-1.0..2.0);
        let p = 1.0 / (1.0 + (-(0.3 + 0.8 * a - 0.5 * b)).exp());
        rows.push(vec![a, b]);
        x.push([1.0, a, b]);
        y.push((rng.random::<f64>() < p) as u8 as f64);
    }
    let design = Matrix::from_rows(&rows).unwrap();
    let mut spec = GlmSpec::new(Family::BernoulliLogit).with_ridge(0.0);
    spec.tol = 1e-12;
    let fit = fit_glm(&spec, &design, &y, None).unwrap();
    assert!(fit.converged);
    let oracle = oracle_maximize(&x, &y);
    for k in 0..3 {
        assert!(
            (fit.coefficients[k] - oracle[k]).abs() < 1e-6,
            "{:?} vs {oracle:?}",
            fit.coefficients
        );
    }
    let score = glm_score(&spec, &design, &y, None, None, &fit).unwrap();
    assert!(score.iter().all(|v| v.abs() <= spec.tol));
}

#[test]
fn logistic_fit_is_permutation_invariant() {
    let mut rng = rng_for(27, &[]);
    let rows: Vec<Vec<f64>> = (0..80)
        .map(|_| vec![rng.sample(StandardNormal), rng.random()])
        .collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|r| (rng.random::<f64>() < 1.0 / (1.0 + (-r[0]).exp())) as u8 as f64)
        .collect();
    let spec = GlmSpec::new(Family::BernoulliLogit);
    let a = fit_glm(&spec, &Matrix::from_rows(&rows).unwrap(), &y, None).unwrap();
    let mut idx: Vec<usize> = (0..80).collect();
    idx.reverse();
    idx.rotate_left(17);
    let rows2: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
    let y2: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let b = fit_glm(&spec, &Matrix::from_rows(&rows2).unwrap(), &y2, None).unwrap();
    for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
        assert!((u - v).abs() < 1e-9);
    }
    let c = fit_glm(
        &GlmSpec::new(Family::BernoulliLogit).with_ridge(1e-10),
        &Matrix::from_rows(&rows).unwrap(),
        &y,
        None,
    )
    .unwrap();
    let d = fit_glm(
        &GlmSpec::new(Family::BernoulliLogit).with_ridge(0.0),
        &Matrix::from_rows(&rows).unwrap(),
        &y,
        None,
    )
    .unwrap();
    for (u, v) in c.coefficients.iter().zip(&d.coefficients) {
        assert!((u - v).abs() < 1e-6);
    }
}

#[test]
fn log_mean_fit_matches_nonlinear_least_squares() {
    // normal errors around exp(0.5 + 0.3 x): compare with Gauss–Newton by hand
    let mut rng = rng_for(28, &[]);
    let xs: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..2.0)).collect();
    let y: Vec<f64> = xs
        .iter()
        .map(|x| (0.5 + 0.3 * x).exp() + 0.2 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let design = Matrix::from_rows(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>()).unwrap();
    let mut spec = GlmSpec::new(Family::GaussianLogmean).with_ridge(0.0);
    spec.tol = 1e-12;
    let fit = fit_glm(&spec, &design, &y, None).unwrap();
    let mut b = [0.0f64, 0.0];
    for _ in 0..200 {
        let mut jtj = DMatrix::<f64>::zeros(2, 2);
        let mut jtr = nalgebra::DVector::<f64>::zeros(2);
        for (x, yi) in xs.iter().zip(&y) {
            let mu = (b[0] + b[1] * x).exp();
            let j = [mu, mu * x];
            for r in 0..2 {
                jtr[r] += j[r] * (yi - mu);
                for c in 0..2 {
                    jtj[(r, c)] += j[r] * j[c];
                }
            }
        }
        let step = jtj.lu().solve(&jtr).unwrap();
        b[0] += step[0];
        b[1] += step[1];
    }
    assert!((fit.coefficients[0] - b[0]).abs() < 1e-6 && (fit.coefficients[1] - b[1]).abs() < 1e-6);
}
