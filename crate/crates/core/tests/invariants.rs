//! Property checks over randomly drawn small instances.

use lstdq_core::coverage::{chi2_tabular, cvrg_population};
use lstdq_core::estimators::{lossmin_solve, lstdq_solve, population_moments};
use lstdq_core::features::{realizable_random_features, tabular_features};
use lstdq_core::generators::{random_dist, random_mdp, random_policy};
use lstdq_core::mdp::{exact_q, exact_return, occupancy};
use lstdq_core::sampling::sample_dataset;
use lstdq_core::{FeatureMap, LossMinConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (usize, usize, f64, u64)> {
    (2usize..6, 1usize..4, 0.0f64..0.95, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn q_satisfies_bellman_equation((ns, na, gamma, seed) in instance()) {
        let mdp = random_mdp(ns, na, gamma, seed);
        let pi = random_policy(ns, na, seed ^ 1);
        let q = exact_q(&mdp, &pi);
        for p in 0..mdp.num_pairs() {
            let mut next = 0.0;
            for s2 in 0..ns {
                let v: f64 = (0..na).map(|a2| pi.prob(s2, a2) * q[mdp.pair(s2, a2)]).sum();
                next += mdp.transition()[(p, s2)] * v;
            }
            prop_assert!((q[p] - mdp.mean_reward()[p] - gamma * next).abs() < 1e-9);
        }
    }

    #[test]
    fn occupancy_is_a_distribution((ns, na, gamma, seed) in instance()) {
        let mdp = random_mdp(ns, na, gamma, seed);
        let pi = random_policy(ns, na, seed ^ 2);
        let mu = occupancy(&mdp, &pi);
        prop_assert!(mu.probs().iter().all(|&x| x >= -1e-12));
        prop_assert!((mu.probs().sum() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn tabular_coverage_matches_second_moment_of_ratio((ns, na, gamma, seed) in instance()) {
        let mdp = random_mdp(ns, na, gamma, seed);
        let pi = random_policy(ns, na, seed ^ 3);
        let mu_d = random_dist(mdp.num_pairs(), seed ^ 4);
        let m = population_moments(&mdp, &pi, &mu_d, &tabular_features(&mdp)).unwrap();
        let c = cvrg_population(&m);
        let chi = chi2_tabular(&mdp, &pi, &mu_d).unwrap();
        prop_assert!(c >= 1.0 - 1e-9);
        prop_assert!((c - chi).abs() <= 1e-7 * chi.max(1.0));
    }

    #[test]
    fn coverage_is_invariant_under_feature_reparametrization(
        (ns, na, gamma, seed) in instance(),
        shear in -2.0f64..2.0,
        scale in 0.2f64..5.0,
    ) {
        let mdp = random_mdp(ns, na, gamma, seed);
        let pi = random_policy(ns, na, seed ^ 5);
        let mu_d = random_dist(mdp.num_pairs(), seed ^ 6);
        let d = mdp.num_pairs().min(3);
        let fmap = realizable_random_features(&mdp, &pi, d, seed ^ 7, 1.0).unwrap();
        let mut t = DMatrix::<f64>::identity(d, d) * scale;
        if d > 1 {
            t[(0, 1)] = shear;
        }
        let moved = FeatureMap::with_tight_bound(fmap.matrix() * &t).unwrap();
        let c0 = cvrg_population(&population_moments(&mdp, &pi, &mu_d, &fmap).unwrap());
        let c1 = cvrg_population(&population_moments(&mdp, &pi, &mu_d, &moved).unwrap());
        prop_assert!((c0 - c1).abs() <= 1e-6 * c0.max(1.0), "{c0} vs {c1}");
    }

    #[test]
    fn population_solution_recovers_the_return((ns, na, gamma, seed) in instance()) {
        let mdp = random_mdp(ns, na, gamma, seed);
        let pi = random_policy(ns, na, seed ^ 8);
        let mu_d = random_dist(mdp.num_pairs(), seed ^ 9);
        let fmap = realizable_random_features(&mdp, &pi, mdp.num_pairs().min(3), seed ^ 10, 1.0).unwrap();
        let m = population_moments(&mdp, &pi, &mu_d, &fmap).unwrap();
        let sol = lstdq_solve(&m);
        prop_assert!(sol.invertible);
        let theta = sol.theta.unwrap();
        let j = m.phi0().dot(&theta);
        prop_assert!((j - exact_return(&mdp, &pi)).abs() < 1e-8);

        let loose = lossmin_solve(&m, &LossMinConfig::new(1e8).unwrap()).unwrap();
        let diff = (loose.theta.unwrap() - &theta).norm();
        prop_assert!(diff <= 1e-6 * theta.norm().max(1.0));
    }

    #[test]
    fn dataset_prefixes_agree(seed in any::<u64>(), n in 1usize..200, extra in 0usize..50) {
        let mdp = random_mdp(3, 2, 0.5, 17);
        let pi = random_policy(3, 2, 18);
        let mu_d = random_dist(6, 19);
        let short = sample_dataset(&mdp, &pi, &mu_d, n, seed).unwrap();
        let long = sample_dataset(&mdp, &pi, &mu_d, n + extra, seed).unwrap();
        prop_assert_eq!(short.transitions(), &long.transitions()[..n]);
    }
}
