//! The recursive GAE implementation against the literal nested-sum oracle on
//! randomized episodes.

mod common;

use common::brute_force_gae;
use cory_core::ppo::gae;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[test]
fn gae_matches_brute_force_on_randomized_episodes() {
    let mut rng = StdRng::seed_from_u64(2024);
    let lambdas = [0.0, 1.0, 0.95, 0.5];
    let gammas = [0.9, 1.0];
    let mut checked = 0;
    for case in 0..200 {
        let len = rng.gen_range(1..=6);
        let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = gammas[case % gammas.len()];
        let lambda = lambdas[case % lambdas.len()];
        let fast = gae(&rewards, &values, gamma, lambda).unwrap();
        let slow = brute_force_gae(&rewards, &values, gamma, lambda);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
        }
        checked += 1;
    }
    assert_eq!(checked, 200);
}
