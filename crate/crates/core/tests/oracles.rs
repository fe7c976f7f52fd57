mod common;

use common::{worst, TOLERANCE};

fn check(name: &str, f: fn(u64) -> f64) {
    let err = worst(f);
    assert!(err < TOLERANCE, "{name}: max error {err:e}");
}

#[test]
fn affinity_matches_triple_loop() {
    check("affinity", common::eq3);
}

#[test]
fn turn_persona_relevance_matches_dense_mlp() {
    check("relevance", common::eq5);
}

#[test]
fn global_topic_aggregation_matches_dense() {
    check("aggregation", common::eq7);
}

#[test]
fn persona_set_aggregates_match_dense() {
    check("persona sets", common::eq10);
}

#[test]
fn persona_topic_distribution_matches_dense() {
    check("persona topic", common::eq11);
}

#[test]
fn topic_distribution_matches_dense() {
    check("topic head", common::eq13);
}

#[test]
fn copy_distribution_matches_dense() {
    check("copy", common::eq16);
}
