//! PK batch construction: `P` identities with `K` images each.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{DipError, Result};

/// All batches of one epoch pass.
///
/// Each identity's images are shuffled and cut into chunks of `k` (a short
/// remainder is dropped). Each batch takes the `p` identities with the most
/// chunks left, ties broken at random, so no image repeats within the pass and
/// the pool drains evenly.
pub fn pk_epoch<R: Rng + ?Sized>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if p < 2 || k < 2 {
        return Err(DipError::Config(format!("PK sampling needs P >= 2 and K >= 2, got {p}x{k}")));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let eligible = groups.values().filter(|g| g.len() >= k).count();
    if eligible < p {
        return Err(DipError::InsufficientData(format!(
            "{eligible} identities have at least {k} images; a batch needs {p}"
        )));
    }
    let mut chunks: Vec<Vec<Vec<usize>>> = groups
        .into_values()
        .map(|mut g| {
            g.shuffle(rng);
            g.chunks_exact(k).map(<[usize]>::to_vec).collect()
        })
        .collect();
    let mut batches = Vec::new();
    loop {
        let mut open: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
        if open.len() < p {
            break;
        }
        open.shuffle(rng);
        open.sort_by_key(|&i| std::cmp::Reverse(chunks[i].len()));
        let chosen = &open[..p];
        let mut batch = Vec::with_capacity(p * k);
        for &id in chosen {
            batch.extend(chunks[id].pop().expect("open identity has a chunk"));
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// A single PK batch.
pub fn pk_sample<R: Rng + ?Sized>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    Ok(pk_epoch(labels, p, k, rng)?.swap_remove(0))
}
