//! Library results against brute-force references.

mod common;

use common::{criteria, require};

#[test]
fn patch_count_formula() {
    require(criteria::patch_count());
}

#[test]
fn distances_and_ranking_metrics_match_oracles() {
    require(criteria::metric_oracles());
}

#[test]
fn batch_hard_mining_matches_exhaustive_search() {
    require(criteria::mining_oracle());
}

#[test]
fn implicit_position_invariants_and_closed_forms() {
    require(criteria::implicit_invariants());
}

#[test]
fn position_equivariance_fixture() {
    require(criteria::equivariance());
}
