use rand_distr::{Binomial, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How stratum counts enter the Dirichlet posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conjugacy {
    /// Parameters `n_j + α_j − 1`.
    #[default]
    Printed,
    /// Parameters `n_j + α_j`.
    Standard,
}

impl Conjugacy {
    pub fn parameters(self, counts: &[usize], alpha: &[f64]) -> Result<Vec<f64>> {
        if counts.len() != alpha.len() {
            return Err(Error::Dimension("counts and alpha differ in length".into()));
        }
        let shift = match self {
            Conjugacy::Printed => -1.0,
            Conjugacy::Standard => 0.0,
        };
        let params: Vec<f64> = counts
            .iter()
            .zip(alpha)
            .map(|(&n, &a)| n as f64 + a + shift)
            .collect();
        if let Some(j) = params.iter().position(|p| !(*p > 0.0)) {
            return Err(Error::Validation(format!(
                "Dirichlet parameter for stratum {j} is {} (must be positive); increase alpha",
                params[j]
            )));
        }
        Ok(params)
    }
}

/// One draw from the Dirichlet posterior of the stratum shares.
pub fn sample_dirichlet_posterior<R: rand::Rng + ?Sized>(
    counts: &[usize],
    alpha: &[f64],
    conjugacy: Conjugacy,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let params = conjugacy.parameters(counts, alpha)?;
    if params.len() == 1 {
        return Ok(vec![1.0]);
    }
    let mut g: Vec<f64> = params
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .map(|d| d.sample(rng))
                .map_err(|e| Error::Validation(format!("gamma shape {a}: {e}")))
        })
        .collect::<Result<_>>()?;
    let total: f64 = g.iter().sum();
    if !(total > 0.0) {
        // all gamma draws underflowed; fall back to a uniform pick
        let j = rng.random_range(0..g.len());
        g.iter_mut().for_each(|v| *v = 0.0);
        g[j] = 1.0;
        return Ok(g);
    }
    g.iter_mut().for_each(|v| *v /= total);
    Ok(g)
}

/// Multinomial draw by sequential conditional binomials.
pub fn sample_multinomial<R: rand::Rng + ?Sized>(
    n: u64,
    probs: &[f64],
    rng: &mut R,
) -> Result<Vec<u64>> {
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Validation(
            "multinomial probabilities must be nonnegative".into(),
        ));
    }
    let mut remaining_mass: f64 = probs.iter().sum();
    if !(remaining_mass > 0.0) {
        return Err(Error::Validation(
            "multinomial probabilities sum to zero".into(),
        ));
    }
    let mut left = n;
    let mut out = vec![0u64; probs.len()];
    for (j, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if j + 1 == probs.len() {
            out[j] = left;
            break;
        }
        let q = (p / remaining_mass).clamp(0.0, 1.0);
        let k = Binomial::new(left, q)
            .map_err(|e| Error::Validation(format!("binomial({left}, {q}): {e}")))?
            .sample(rng);
        out[j] = k;
        left -= k;
        remaining_mass -= p;
        if !(remaining_mass > 0.0) {
            // remaining categories carry no mass; roundoff leftovers stay here
            out[j] += left;
            left = 0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_dirichlet_posterior(&[4], &[1.0], Conjugacy::Printed, &mut rng).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn nonpositive_parameter_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_dirichlet_posterior(&[0, 3], &[1.0, 1.0], Conjugacy::Printed, &mut rng)
            .unwrap_err();
        assert!(err.to_string().contains("alpha"));
        assert!(
            sample_dirichlet_posterior(&[0, 3], &[1.0, 1.0], Conjugacy::Standard, &mut rng).is_ok()
        );
    }

    #[test]
    fn multinomial_conserves_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let r = sample_multinomial(977, &[0.1, 0.0, 0.5, 0.4], &mut rng).unwrap();
            assert_eq!(r.iter().sum::<u64>(), 977);
            assert_eq!(r[1], 0);
        }
    }
}
