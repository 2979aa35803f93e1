//! Randomized invariants across the crate.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpnc_core::harness::stats::{quantile, quartiles};
use dpnc_core::harness::ExperimentConfig;
use dpnc_core::objective::{make_problem, Dataset, ProblemKind};
use dpnc_core::oracle::SampleCursor;
use dpnc_core::packing::em_weights_from_values;
use dpnc_core::privacy::{compose_advanced, laplace_inverse_cdf, Budget};
use dpnc_core::select::certify_sosp;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn laplace_quantile_symmetry_and_monotonicity(
        u in 1e-9f64..0.5,
        b in 1e-6f64..1e6,
    ) {
        let lo = laplace_inverse_cdf(u, b).unwrap();
        let hi = laplace_inverse_cdf(1.0 - u, b).unwrap();
        // Symmetric law: opposite-tail quantiles mirror each other.
        prop_assert!((lo + hi).abs() <= 1e-9 * hi.abs().max(1.0));
        prop_assert!(lo <= 0.0 && hi >= 0.0);
        // Monotone in the probability.
        let mid = laplace_inverse_cdf(0.5, b).unwrap();
        prop_assert!(lo <= mid && mid <= hi);
    }

    #[test]
    fn advanced_composition_round_trips(
        eps in 1e-6f64..0.9,
        delta in 1e-12f64..0.4,
        k in 1u64..1000,
    ) {
        let per = compose_advanced(Budget { epsilon: eps, delta }, k).unwrap();
        let delta_back = per.delta * 2.0 * k as f64;
        let eps_back = per.epsilon * 2.0 * (2.0 * k as f64 * (2.0 / delta_back).ln()).sqrt();
        prop_assert!((eps_back - eps).abs() <= 1e-12 * eps);
        prop_assert!((delta_back - delta).abs() <= 1e-12 * delta);
        // Splitting across more accesses only shrinks the per-access cost.
        let per_more = compose_advanced(Budget { epsilon: eps, delta }, k + 1).unwrap();
        prop_assert!(per_more.epsilon < per.epsilon);
    }

    #[test]
    fn selection_weights_are_a_distribution_and_order_preserving(
        values in prop::collection::vec(-50.0f64..50.0, 1..40),
        eps in 0.0f64..5.0,
    ) {
        let probs = em_weights_from_values(&values, eps, 100, 2.0);
        let total: f64 = probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(probs.iter().all(|p| *p >= 0.0 && p.is_finite()));
        // Lower risk never gets a smaller selection probability.
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] <= values[j] {
                    prop_assert!(probs[i] >= probs[j] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn certification_matches_the_definition(
        gx in -5.0f64..5.0,
        gy in -5.0f64..5.0,
        smin in -5.0f64..5.0,
        alpha in 1e-6f64..5.0,
        rho in 1e-6f64..5.0,
    ) {
        let rep = certify_sosp(&[gx, gy], smin, alpha, rho);
        let norm = (gx * gx + gy * gy).sqrt();
        prop_assert_eq!(rep.is_fosp, norm <= alpha);
        prop_assert_eq!(rep.is_sosp, norm <= alpha && smin >= -(rho * alpha).sqrt());
        prop_assert!(!rep.is_sosp || rep.is_fosp);
    }

    #[test]
    fn cursor_partitions_indices(
        n in 1usize..300,
        k in 1usize..20,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cursor = SampleCursor::new(n, &mut rng);
        let mut seen = std::collections::HashSet::new();
        while cursor.remaining() >= k {
            for &i in cursor.take(k).unwrap() {
                prop_assert!(i < n);
                prop_assert!(seen.insert(i));
            }
        }
        prop_assert!(cursor.take(k).is_err() || cursor.remaining() >= k);
    }

    #[test]
    fn quantiles_stay_ordered_and_bounded(
        values in prop::collection::vec(-1e6f64..1e6, 1..200),
    ) {
        let (q1, q2, q3) = quartiles(&values);
        let lo = values.iter().cloned().fold(f64::MAX, f64::min);
        let hi = values.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(lo <= q1 && q1 <= q2 && q2 <= q3 && q3 <= hi);
        prop_assert_eq!(quantile(&values, 0.0), lo);
        prop_assert_eq!(quantile(&values, 1.0), hi);
    }

    #[test]
    fn config_round_trips_through_the_flat_format(
        epsilon in 1e-3f64..10.0,
        delta in 0.0f64..0.5,
        omega in 1e-3f64..0.99,
        seed in 0u64..u64::MAX,
        trials in 0usize..500,
        perturbation in 0.0f64..2.0,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.epsilon = epsilon;
        cfg.delta = delta;
        cfg.omega = omega;
        cfg.seed = seed;
        cfg.trials = trials;
        cfg.perturbation = perturbation;
        let text = cfg.render();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(back.render(), text);
        prop_assert_eq!(back.epsilon, epsilon);
        prop_assert_eq!(back.seed, seed);
    }

    #[test]
    fn dataset_csv_round_trips(
        n in 1usize..50,
        d in 1usize..4,
        p in 0.0f64..1.5,
        seed in 0u64..500,
    ) {
        let problem = make_problem(ProblemKind::Quadratic, d, p, seed).unwrap();
        let ds = problem.sample_dataset(n);
        let mut buf = Vec::new();
        ds.write_csv(&problem, &mut buf).unwrap();
        let (back, header) = Dataset::read_csv(&mut &buf[..]).unwrap();
        prop_assert_eq!(back, ds);
        prop_assert_eq!(header.n, n);
        prop_assert_eq!(header.d, d);
    }
}
