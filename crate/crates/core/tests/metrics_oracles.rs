mod common;

use common::oracles::{bias_deviation, ece_deviation, geometry_deviation};

const TOL: f64 = 1e-10;

#[test]
fn ece_matches_per_bin_scan() {
    for seed in 1..4 {
        let dev = ece_deviation(seed);
        assert!(dev <= TOL, "seed {seed}: {dev:e}");
    }
}

#[test]
fn bias_matches_direct_kl_and_entropy_identity() {
    for seed in 1..4 {
        let dev = bias_deviation(seed);
        assert!(dev <= TOL, "seed {seed}: {dev:e}");
    }
}

#[test]
fn geometry_matches_pairwise_double_loop() {
    for seed in 1..4 {
        let dev = geometry_deviation(seed);
        assert!(dev <= TOL, "seed {seed}: {dev:e}");
    }
}
