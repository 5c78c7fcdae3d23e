//! Sparse all-to-all planning: each projected gaussian is sent only to the
//! workers whose owned pixel blocks its footprint rectangle overlaps.

use grendel_core::project::ProjectedShard;
use grendel_core::raster::footprint_tiles;

use crate::partition::PixelPartition;

/// Send lists of one worker for one iteration: per destination, the
/// (batch view, local gaussian index) pairs in deterministic order. The
/// backward plan is the exact transpose and is reconstructed by receivers
/// from the provenance they record on arrival.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangePlan {
    pub sends: Vec<Vec<(u32, u32)>>,
}

impl ExchangePlan {
    pub fn total_entries(&self) -> u64 {
        self.sends.iter().map(|s| s.len() as u64).sum()
    }
}

/// Builds the send lists from this worker's per-view projections. A
/// gaussian goes to worker `g` once per view iff its footprint overlaps at
/// least one block owned by `g` in that view; invisible gaussians go
/// nowhere.
pub fn build_exchange_plan(
    projected: &[ProjectedShard],
    partition: &PixelPartition,
) -> ExchangePlan {
    let workers = partition.workers;
    let mut sends: Vec<Vec<(u32, u32)>> = vec![Vec::new(); workers];
    for (v, shard) in projected.iter().enumerate() {
        let vb = &partition.layout.views[v];
        for i in 0..shard.len() {
            if !shard.visible[i] {
                continue;
            }
            let Some((tx0, tx1, ty0, ty1)) = footprint_tiles(
                shard.mean2d[i],
                shard.radius[i],
                vb.tiles_x,
                vb.tiles_y,
            ) else {
                continue;
            };
            let mut dests: u32 = 0;
            for ty in ty0..=ty1 {
                // Blocks of one tile row are contiguous in the global row,
                // so their owners form a contiguous rank range.
                let first = vb.block_offset + ty * vb.tiles_x + tx0;
                let last = vb.block_offset + ty * vb.tiles_x + tx1;
                let lo = partition.owner_of_block(first);
                let hi = partition.owner_of_block(last);
                for g in lo..=hi {
                    dests |= 1 << g;
                }
            }
            for (g, send) in sends.iter_mut().enumerate() {
                if dests & (1 << g) != 0 {
                    send.push((v as u32, i as u32));
                }
            }
        }
    }
    ExchangePlan { sends }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{BlockLayout, PixelPartition};

    fn shard_with(entries: &[([f64; 2], f64, bool)]) -> ProjectedShard {
        let mut s = ProjectedShard::default();
        for &(mean, radius, visible) in entries {
            s.mean2d.push(mean);
            s.depth.push(1.0);
            s.radius.push(radius);
            s.conic.push([1.0, 0.0, 1.0]);
            s.rgb.push([0.5; 3]);
            s.opacity.push(0.5);
            s.visible.push(visible);
        }
        s
    }

    /// Oracle: rectangle/ownership scan over every block.
    fn expected_dests(
        partition: &PixelPartition,
        view: usize,
        mean: [f64; 2],
        radius: f64,
    ) -> Vec<usize> {
        let vb = &partition.layout.views[view];
        let mut dests = vec![false; partition.workers];
        for ty in 0..vb.tiles_y {
            for tx in 0..vb.tiles_x {
                let (x0, x1) = ((tx * 16) as f64, ((tx + 1) * 16) as f64);
                let (y0, y1) = ((ty * 16) as f64, ((ty + 1) * 16) as f64);
                if mean[0] - radius < x1
                    && mean[0] + radius > x0
                    && mean[1] - radius < y1
                    && mean[1] + radius > y0
                {
                    dests[partition.owner_of_block(vb.block_offset + ty * vb.tiles_x + tx)] = true;
                }
            }
        }
        (0..partition.workers).filter(|&g| dests[g]).collect()
    }

    #[test]
    fn localized_gaussian_goes_to_one_worker() {
        let layout = BlockLayout::new(&[(64, 16)]);
        let part = PixelPartition::uniform(layout, 2);
        // Blocks 0..2 belong to worker 0; a footprint inside block 0 stays.
        let shard = shard_with(&[([8.0, 8.0], 2.0, true)]);
        let plan = build_exchange_plan(&[shard], &part);
        assert_eq!(plan.sends[0], vec![(0, 0)]);
        assert!(plan.sends[1].is_empty());
    }

    #[test]
    fn boundary_spanning_gaussian_sent_once_to_each_neighbor() {
        let layout = BlockLayout::new(&[(64, 16)]);
        let part = PixelPartition::uniform(layout, 2);
        // Boundary between blocks 1 and 2 sits at x = 32.
        let shard = shard_with(&[([32.0, 8.0], 3.0, true)]);
        let plan = build_exchange_plan(&[shard], &part);
        assert_eq!(plan.sends[0], vec![(0, 0)]);
        assert_eq!(plan.sends[1], vec![(0, 0)]);
        assert_eq!(
            expected_dests(&part, 0, [32.0, 8.0], 3.0),
            vec![0, 1]
        );
    }

    #[test]
    fn invisible_gaussians_are_not_sent() {
        let layout = BlockLayout::new(&[(64, 16)]);
        let part = PixelPartition::uniform(layout, 2);
        let shard = shard_with(&[([8.0, 8.0], 2.0, false)]);
        let plan = build_exchange_plan(&[shard], &part);
        assert_eq!(plan.total_entries(), 0);
    }

    #[test]
    fn per_view_visibility_routes_per_view() {
        let layout = BlockLayout::new(&[(32, 16), (32, 16)]);
        let part = PixelPartition::uniform(layout, 2);
        // View 0 occupies blocks 0..2 (worker 0), view 1 blocks 2..4
        // (worker 1). Visible only in view 1.
        let v0 = shard_with(&[([8.0, 8.0], 2.0, false)]);
        let v1 = shard_with(&[([8.0, 8.0], 2.0, true)]);
        let plan = build_exchange_plan(&[v0, v1], &part);
        assert!(plan.sends[0].is_empty());
        assert_eq!(plan.sends[1], vec![(1, 0)]);
    }

    #[test]
    fn plan_matches_rectangle_oracle_on_random_scenes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let layout = BlockLayout::new(&[(128, 64)]);
        for g in [1usize, 2, 3, 5, 8] {
            let et: Vec<f64> = (0..layout.total_blocks)
                .map(|_| rng.random_range(0.0..4.0))
                .collect();
            let part = PixelPartition::new(layout.clone(), g, &et);
            let entries: Vec<([f64; 2], f64, bool)> = (0..60)
                .map(|_| {
                    (
                        [rng.random_range(-20.0..148.0), rng.random_range(-20.0..84.0)],
                        rng.random_range(0.5..40.0),
                        true,
                    )
                })
                .collect();
            let shard = shard_with(&entries);
            let plan = build_exchange_plan(&[shard], &part);
            for (i, &(mean, radius, _)) in entries.iter().enumerate() {
                let expect = expected_dests(&part, 0, mean, radius);
                let got: Vec<usize> = (0..g)
                    .filter(|&w| plan.sends[w].contains(&(0, i as u32)))
                    .collect();
                assert_eq!(got, expect, "gaussian {i} mean {mean:?} r {radius}");
            }
        }
    }
}
