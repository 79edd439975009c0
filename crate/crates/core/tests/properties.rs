use gppp_core::bayes::dirichlet::{sample_multinomial, Conjugacy};
use gppp_core::data::{
    load_combined, strata_from_weights, write_combined, CombinedSample, Schema, UnitRecord,
};
use gppp_core::estimators::percentile_interval;
use gppp_core::fpbb::{draw_polya, expand_predictions};
use gppp_core::gp::{kernel_gram, matern_poly_kernel, KernelParams};
use gppp_core::papp::{clamp_probabilities, PI_FLOOR};
use gppp_core::rng::rng_for;
use gppp_core::sim::{compute_metrics, ReplicationOutcome};
use proptest::prelude::*;

fn weight_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop::sample::select(vec![1.5, 2.0, 4.0, 7.25, 10.0, 33.0]),
        1..60,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn strata_partition_reference_sample(w in weight_vec()) {
        let total: f64 = w.iter().sum();
        let s = strata_from_weights(&w, total.ceil() as usize, 0.0).unwrap();
        let mut distinct = w.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assert_eq!(s.len(), distinct.len());
        prop_assert_eq!(s.counts().iter().sum::<usize>(), w.len());
        for pair in s.levels.windows(2) {
            prop_assert!(pair[0].value < pair[1].value);
            prop_assert!(pair[0].pi >= pair[1].pi);
        }
        for (i, &j) in s.stratum_of.iter().enumerate() {
            prop_assert_eq!(s.levels[j].value, w[i]);
        }
        prop_assert!(s.pis().iter().all(|p| *p > 0.0 && *p <= 1.0));
    }

    #[test]
    fn multinomial_conserves_total(n in 0u64..5000, p in prop::collection::vec(0.0f64..1.0, 1..12), seed: u64) {
        prop_assume!(p.iter().sum::<f64>() > 1e-6);
        let k = sample_multinomial(n, &p, &mut rng_for(seed, &[])).unwrap();
        prop_assert_eq!(k.iter().sum::<u64>(), n);
        for (c, q) in k.iter().zip(&p) {
            if *q == 0.0 {
                prop_assert_eq!(*c, 0);
            }
        }
    }

    #[test]
    fn polya_rows_total_population(w in weight_vec(), extra in 0usize..500, seed: u64) {
        let s = strata_from_weights(&w, w.len() + extra, 0.0).unwrap();
        let n_pop = w.len() + extra;
        prop_assume!(extra == 0 || s.pis().iter().any(|p| *p < 1.0));
        let alpha = vec![1.0; s.len()];
        let polya = draw_polya(&s, n_pop, 8, &alpha, Conjugacy::Printed, seed).unwrap();
        let counts = s.counts();
        for (n, xi) in polya.n_draws.iter().zip(&polya.xi_draws) {
            prop_assert_eq!(n.iter().sum::<u64>(), n_pop as u64);
            for (nj, cj) in n.iter().zip(&counts) {
                prop_assert!(*nj >= *cj as u64);
            }
            prop_assert!((xi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn expansion_is_linear(w in weight_vec(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed: u64) {
        let s = strata_from_weights(&w, w.len() * 3, 0.0).unwrap();
        prop_assume!(s.pis().iter().any(|p| *p < 1.0));
        let polya = draw_polya(&s, w.len() * 3, 4, &vec![1.0; s.len()], Conjugacy::Standard, seed).unwrap();
        let mut rng = rng_for(seed, &[1]);
        use rand::Rng as _;
        let y1: Vec<Vec<f64>> = (0..4).map(|_| (0..w.len()).map(|_| rng.random::<f64>()).collect()).collect();
        let y2: Vec<Vec<f64>> = (0..4).map(|_| (0..w.len()).map(|_| rng.random::<f64>()).collect()).collect();
        let mix: Vec<Vec<f64>> = y1.iter().zip(&y2).map(|(u, v)| u.iter().zip(v).map(|(u, v)| a * u + b * v).collect()).collect();
        let t1 = expand_predictions(&polya, &s, &y1).unwrap();
        let t2 = expand_predictions(&polya, &s, &y2).unwrap();
        let tm = expand_predictions(&polya, &s, &mix).unwrap();
        for k in 0..4 {
            let expect = a * t1[k] + b * t2[k];
            prop_assert!((tm[k] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }
        // a constant prediction expands to N times the constant
        let ones = vec![vec![1.0; w.len()]; 4];
        for t in expand_predictions(&polya, &s, &ones).unwrap() {
            prop_assert!((t - (w.len() * 3) as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn kernel_is_symmetric_psd(u in prop::collection::vec(-5.0f64..5.0, 2..15), alpha in 0.1f64..3.0, rho in 0.1f64..4.0) {
        let params = KernelParams::new(alpha, rho, 1.0).unwrap();
        for &a in &u {
            for &b in &u {
                prop_assert_eq!(matern_poly_kernel(a, b, &params), matern_poly_kernel(b, a, &params));
            }
        }
        let g = kernel_gram(&u, &params).to_nalgebra();
        let eig = g.symmetric_eigenvalues();
        let scale = eig.amax().max(1.0);
        prop_assert!(eig.iter().all(|e| *e >= -1e-9 * scale));
    }

    #[test]
    fn percentile_interval_is_ordered(v in prop::collection::vec(-100.0f64..100.0, 2..200), level in 0.5f64..0.99) {
        prop_assert!(percentile_interval(&v[..1], level).is_err());
        let (lo, hi) = percentile_interval(&v, level).unwrap();
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && lo <= hi && hi <= max);
    }

    #[test]
    fn metric_identities(points in prop::collection::vec(1.0f64..20.0, 2..40), half in prop::collection::vec(0.0f64..5.0, 40), truth in 5.0f64..15.0) {
        let outcomes: Vec<ReplicationOutcome> = points
            .iter()
            .zip(&half)
            .map(|(&p, &h)| ReplicationOutcome { point: p, lower: p - h, upper: p + h, se: h / 2.0 })
            .collect();
        let row = compute_metrics(1, "s", "m", &outcomes, 0, truth);
        prop_assert!(row.r_mse + 1e-9 >= row.r_bias.abs());
        prop_assert!((0.0..=100.0).contains(&row.cr_ci));
        prop_assert!((row.rl_ci - 100.0 * row.l_ci / truth).abs() < 1e-9);
        prop_assert!(row.bias_p025 <= row.bias_p975);
    }

    #[test]
    fn clamped_probabilities_stay_in_range(logs in prop::collection::vec(-40.0f64..3.0, 1..50)) {
        let (pi, n) = clamp_probabilities(&logs);
        prop_assert!(pi.iter().all(|p| (PI_FLOOR..=1.0).contains(p)));
        let expected = logs.iter().filter(|l| l.exp() < PI_FLOOR || l.exp() > 1.0).count();
        prop_assert_eq!(n, expected);
    }

    #[test]
    fn combined_sample_csv_round_trip(
        rows in prop::collection::vec((any::<bool>(), -1e6f64..1e6, -1e3f64..1e3, 1.0f64..500.0), 1..40)
    ) {
        let records: Vec<UnitRecord> = rows
            .iter()
            .map(|&(in_a, y, x, w)| UnitRecord {
                outcome: in_a.then_some(y),
                x: vec![x, x * 0.1 + 1.0 / 3.0],
                d: vec![x.sin()],
                in_a,
                in_r: !in_a,
                weight_r: (!in_a).then_some(w),
                offset: None,
                ref_prob: None,
            })
            .collect();
        let n_pop = rows.len() * 1000;
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let sample = CombinedSample::new(records, names(&["x1", "x2"]), names(&["d1"]), Some(n_pop)).unwrap();
        let schema = Schema { x: names(&["x1", "x2"]), d: names(&["d1"]), ..Schema::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_combined(&path, &sample, &schema).unwrap();
        let back = load_combined(&path, &schema, Some(n_pop)).unwrap();
        prop_assert_eq!(back, sample);
    }
}
