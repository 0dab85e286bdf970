//! Retrieval metrics against a brute-force reference.

mod support;

use support::{compare, instance};

#[test]
fn fifty_tied_instances_match_reference() {
    for seed in 0..50 {
        compare(&instance(seed, true, false), false).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn fifty_continuous_instances_match_reference() {
    for seed in 100..150 {
        compare(&instance(seed, false, false), false).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn camera_exclusion_matches_reference() {
    for seed in 200..250 {
        let inst = instance(seed, true, true);
        compare(&inst, true).unwrap_or_else(|e| panic!("seed {seed} on: {e}"));
        compare(&inst, false).unwrap_or_else(|e| panic!("seed {seed} off: {e}"));
    }
}
