#![allow(dead_code)]

pub mod criteria;
pub mod grad_cases;
pub mod oracles;

/// Panics with the violation when a criterion fails.
pub fn require(v: criteria::Verdict) {
    if let Err(e) = v {
        panic!("{e}");
    }
}
