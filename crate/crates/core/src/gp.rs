//! Kernels on the log pseudo-inclusion scale and their reduced-rank basis.
//!
//! The covariance is a Matérn-3/2 term plus a normalized order-1 polynomial
//! term. Only the Matérn part is approximated by the Laplacian sine basis;
//! the polynomial part is exactly rank 2 with feature map
//! `[τ, u] / √(τ² + u²)`.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Matérn smoothness, fixed.
pub const NU: f64 = 1.5;
/// Order of the polynomial kernel, fixed.
pub const POLY_ORDER: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Marginal SD of the Matérn term.
    pub alpha: f64,
    /// Length-scale.
    pub rho: f64,
    /// Offset of the polynomial kernel.
    pub tau: f64,
}

impl KernelParams {
    pub fn new(alpha: f64, rho: f64, tau: f64) -> Result<Self> {
        let p = Self { alpha, rho, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.rho, self.tau]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Validation(
                "kernel parameters must be positive and finite".into(),
            ))
        }
    }
}

pub fn matern32(r: f64, alpha: f64, rho: f64) -> f64 {
    let s = SQRT3 * r.abs() / rho;
    alpha * alpha * (1.0 + s) * (-s).exp()
}

/// Exact feature map of the normalized polynomial kernel.
pub fn poly_features(u: f64, tau: f64) -> [f64; 2] {
    let s = (tau * tau + u * u).sqrt();
    [tau / s, u / s]
}

/// Derivatives of [`poly_features`] with respect to `u`.
pub fn poly_features_du(u: f64, tau: f64) -> [f64; 2] {
    let s2 = tau * tau + u * u;
    let s3 = s2 * s2.sqrt();
    [-tau * u / s3, tau * tau / s3]
}

pub fn poly_kernel(ui: f64, uj: f64, tau: f64) -> f64 {
    (tau * tau + ui * uj) / ((tau * tau + ui * ui).sqrt() * (tau * tau + uj * uj).sqrt())
}

pub fn matern_poly_kernel(ui: f64, uj: f64, params: &KernelParams) -> f64 {
    matern32(ui - uj, params.alpha, params.rho) + poly_kernel(ui, uj, params.tau)
}

/// Spectral density of the one-dimensional Matérn-3/2 kernel.
pub fn spectral_density(omega: f64, alpha: f64, rho: f64) -> f64 {
    let lam2 = 3.0 / (rho * rho);
    12.0 * SQRT3 * alpha * alpha / rho.powi(3) / (lam2 + omega * omega).powi(2)
}

/// Sine eigenbasis of the Dirichlet Laplacian on `[ū − L, ū + L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankBasis {
    pub l: usize,
    pub c: f64,
    /// Half-width of the domain.
    pub half_width: f64,
    pub center: f64,
}

impl LowRankBasis {
    pub fn new(l: usize, c: f64, center: f64, half_width: f64) -> Result<Self> {
        if l == 0 {
            return Err(Error::Validation("basis size must be at least 1".into()));
        }
        if !(half_width > 0.0 && half_width.is_finite() && center.is_finite()) {
            return Err(Error::Validation(
                "basis domain must have positive width".into(),
            ));
        }
        Ok(Self {
            l,
            c,
            half_width,
            center,
        })
    }

    /// `ω_j = πj / (2L)`, `j = 1..l`.
    pub fn frequency(&self, j: usize) -> f64 {
        std::f64::consts::PI * j as f64 / (2.0 * self.half_width)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (1..=self.l).map(|j| self.frequency(j)).collect()
    }

    /// `φ_j(u)` for `j = 1..=l`.
    pub fn eigenfunction(&self, j: usize, u: f64) -> f64 {
        let lw = self.half_width;
        (std::f64::consts::PI * j as f64 * (u - self.center + lw) / (2.0 * lw)).sin() / lw.sqrt()
    }

    /// All `l` eigenfunctions at `u` and their derivatives, via the
    /// angle-addition recurrence.
    pub fn features_with_derivative(&self, u: f64, out: &mut [f64], dout: &mut [f64]) {
        let lw = self.half_width;
        let step = std::f64::consts::PI / (2.0 * lw);
        let theta = step * (u - self.center + lw);
        let (s1, c1) = theta.sin_cos();
        let norm = 1.0 / lw.sqrt();
        let (mut s, mut c) = (s1, c1);
        for j in 0..self.l {
            let jf = (j + 1) as f64;
            out[j] = norm * s;
            dout[j] = norm * c * step * jf;
            let ns = s * c1 + c * s1;
            let nc = c * c1 - s * s1;
            s = ns;
            c = nc;
        }
    }

    pub fn features(&self, u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.l];
        let mut d = vec![0.0; self.l];
        self.features_with_derivative(u, &mut out, &mut d);
        out
    }

    /// `√S(ω_j)` for the Matérn-3/2 density.
    pub fn sqrt_spectral(&self, alpha: f64, rho: f64) -> Vec<f64> {
        (1..=self.l)
            .map(|j| spectral_density(self.frequency(j), alpha, rho).sqrt())
            .collect()
    }

    /// Low-rank approximation of the Matérn Gram matrix on `u`.
    pub fn approx_gram(&self, u: &[f64], alpha: f64, rho: f64) -> Matrix {
        let s: Vec<f64> = (1..=self.l)
            .map(|j| spectral_density(self.frequency(j), alpha, rho))
            .collect();
        let feats: Vec<Vec<f64>> = u.iter().map(|&v| self.features(v)).collect();
        let n = u.len();
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for k in 0..n {
                let v: f64 = (0..self.l).map(|j| s[j] * feats[i][j] * feats[k][j]).sum();
                g.set(i, k, v);
            }
        }
        g
    }
}

/// Builds the basis from inputs `u`: centered at their mean, with half-width
/// `c · max|u − ū|`.
pub fn build_basis(u: &[f64], l: usize, c: f64) -> Result<LowRankBasis> {
    if u.is_empty() {
        return Err(Error::Validation(
            "cannot build a basis from no inputs".into(),
        ));
    }
    if !(c > 1.0) {
        return Err(Error::Validation("boundary factor must exceed 1".into()));
    }
    let center = crate::linalg::mean(u);
    let spread = u.iter().fold(0.0f64, |m, v| m.max((v - center).abs()));
    if !(spread > 0.0) {
        return Err(Error::Validation(
            "GP inputs have zero spread; cannot size the basis domain".into(),
        ));
    }
    LowRankBasis::new(l, c, center, c * spread)
}

/// Exact Matérn-3/2 Gram matrix.
pub fn matern_gram(u: &[f64], alpha: f64, rho: f64) -> Matrix {
    let n = u.len();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            g.set(i, k, matern32(u[i] - u[k], alpha, rho));
        }
    }
    g
}

/// Full kernel Gram matrix (Matérn plus polynomial).
pub fn kernel_gram(u: &[f64], params: &KernelParams) -> Matrix {
    let n = u.len();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            g.set(i, k, matern_poly_kernel(u[i], u[k], params));
        }
    }
    g
}

/// Row-normalized kernel weights `k(t_i, s_j) / Σ_j k(t_i, s_j)`.
///
/// The polynomial term can be negative for inputs of opposite sign, so a
/// row whose kernel mass is not positive is an error.
pub fn kernel_smoother_weights(
    targets: &[f64],
    sources: &[f64],
    params: &KernelParams,
) -> Result<Matrix> {
    params.validate()?;
    if sources.is_empty() {
        return Err(Error::Validation(
            "kernel smoother needs at least one source".into(),
        ));
    }
    let mut w = Matrix::zeros(targets.len(), sources.len());
    for (i, &t) in targets.iter().enumerate() {
        let row = w.row_mut(i);
        for (j, &s) in sources.iter().enumerate() {
            row[j] = matern_poly_kernel(t, s, params);
        }
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Validation(format!(
                "kernel mass for target {i} is not positive"
            )));
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(w)
}

/// Final source weights `ŵ_j = Σ_i k_ij w_i`, given smoother rows indexed
/// by reference units and columns by non-probability units.
pub fn smoothed_reference_weights(smoother: &Matrix, weights_r: &[f64]) -> Result<Vec<f64>> {
    if smoother.rows() != weights_r.len() {
        return Err(Error::Dimension(format!(
            "smoother has {} rows but {} reference weights were given",
            smoother.rows(),
            weights_r.len()
        )));
    }
    let mut out = vec![0.0; smoother.cols()];
    for (i, &w) in weights_r.iter().enumerate() {
        for (o, k) in out.iter_mut().zip(smoother.row(i)) {
            *o += k * w;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_at_identical_points() {
        let p = KernelParams::new(1.7, 0.4, 2.0).unwrap();
        for u in [-3.0, 0.0, 0.25, 9.0] {
            assert!((matern_poly_kernel(u, u, &p) - (1.7 * 1.7 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_reference_value() {
        // (1+√3)e^{−√3} + 1/√2 evaluated in extended precision
        let p = KernelParams::new(1.0, 1.0, 1.0).unwrap();
        assert!((matern_poly_kernel(0.0, 1.0, &p) - 1.190_464_505_8).abs() < 1e-9);
    }

    #[test]
    fn kernel_vanishes_far_away() {
        let p = KernelParams::new(1.0, 1.0, 1.0).unwrap();
        let k = matern_poly_kernel(0.0, 1e9, &p);
        assert!(k.abs() < 1e-6, "{k}");
    }

    #[test]
    fn midpoint_of_first_eigenfunction() {
        let b = build_basis(&[-2.0, -1.0, 1.0, 2.0], 4, 1.25).unwrap();
        assert_eq!(b.center, 0.0);
        assert!((b.eigenfunction(1, 0.0) - 1.0 / b.half_width.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn recurrence_matches_direct() {
        let b = build_basis(&[-0.3, 0.9, 2.2], 12, 1.5).unwrap();
        let mut f = vec![0.0; 12];
        let mut d = vec![0.0; 12];
        for u in [-1.0, 0.3, 2.9] {
            b.features_with_derivative(u, &mut f, &mut d);
            for j in 0..12 {
                assert!((f[j] - b.eigenfunction(j + 1, u)).abs() < 1e-12);
                let h = 1e-6;
                let fd =
                    (b.eigenfunction(j + 1, u + h) - b.eigenfunction(j + 1, u - h)) / (2.0 * h);
                assert!((d[j] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn poly_feature_map_is_exact() {
        for (a, b) in [(0.0, 1.0), (-2.0, 3.0), (0.5, 0.5)] {
            let fa = poly_features(a, 1.3);
            let fb = poly_features(b, 1.3);
            assert!((fa[0] * fb[0] + fa[1] * fb[1] - poly_kernel(a, b, 1.3)).abs() < 1e-14);
        }
    }

    #[test]
    fn degenerate_spread_rejected() {
        assert!(build_basis(&[1.0, 1.0], 10, 1.25).is_err());
        assert!(build_basis(&[0.0, 1.0], 10, 1.0).is_err());
    }

    #[test]
    fn single_source_smoother() {
        let p = KernelParams::new(1.0, 1.0, 1.0).unwrap();
        let w = kernel_smoother_weights(&[0.1, 0.4, 2.0], &[0.3], &p).unwrap();
        assert!(w.as_slice().iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn equidistant_sources_split_evenly() {
        // huge τ makes the polynomial term constant
        let p = KernelParams::new(1.0, 1.0, 1e8).unwrap();
        let w = kernel_smoother_weights(&[0.5], &[0.0, 1.0], &p).unwrap();
        assert!((w.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((w.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn smoothed_weights_hand_case() {
        let k = Matrix::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.4, 0.0]]).unwrap();
        let w = smoothed_reference_weights(&k, &[10.0, 5.0]).unwrap();
        let expected = [0.2 * 10.0 + 0.6 * 5.0, 0.3 * 10.0 + 0.4 * 5.0, 0.5 * 10.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
