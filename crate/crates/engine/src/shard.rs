//! Gaussian-wise sharding: the per-worker parameter slice and its optimizer
//! and densification state, plus the uniform initial assignment and the
//! random redistribution run after densification events.

use grendel_core::adam::AdamState;
use grendel_core::cloud::GaussianCloud;
use grendel_core::densify::DensifyStats;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{derive, tag};

/// One worker's gaussians: parameters, optimizer moments, densification
/// statistics, and the stable global ids that name them across workers.
#[derive(Debug, Clone, Default)]
pub struct Shard {
    pub gids: Vec<u64>,
    pub cloud: GaussianCloud,
    pub adam: AdamState,
    pub stats: DensifyStats,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.gids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gids.is_empty()
    }
}

/// Uniformly distributes `count` gaussians over `workers` shards: a seeded
/// shuffle chunked into near-equal parts (sizes differ by at most one),
/// each sorted for stable local iteration order.
pub fn shard_gaussians(count: usize, workers: usize, seed: u64) -> Vec<Vec<u32>> {
    assert!(workers >= 1);
    let mut indices: Vec<u32> = (0..count as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, tag::SHARD, count as u64, workers as u64));
    indices.shuffle(&mut rng);
    split_chunks(indices, workers)
}

/// Randomly reassigns an id multiset to `workers` shards with sizes within
/// one of each other. The global multiset is preserved.
pub fn rebalance_gaussians(gids: &[u64], workers: usize, seed: u64, event: u64) -> Vec<Vec<u64>> {
    assert!(workers >= 1);
    let mut ids = gids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, tag::REBALANCE, event, ids.len() as u64));
    ids.shuffle(&mut rng);
    split_chunks(ids, workers)
}

fn split_chunks<T: Ord>(mut items: Vec<T>, workers: usize) -> Vec<Vec<T>> {
    let count = items.len();
    let base = count / workers;
    let extra = count % workers;
    let mut out = Vec::with_capacity(workers);
    // Draining from the back, so compute sizes first.
    let sizes: Vec<usize> = (0..workers)
        .map(|g| base + usize::from(g < extra))
        .collect();
    for size in sizes {
        let rest = items.split_off(size);
        let mut chunk = items;
        chunk.sort();
        out.push(chunk);
        items = rest;
    }
    out
}
