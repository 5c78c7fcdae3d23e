//! Per-block cost measurement and the history-driven cost model feeding the
//! load balancer.
//!
//! Each iteration records, per block, the combined duration of render
//! forward, loss (forward and backward), and render backward. The estimator
//! pools durations per worker (a worker's per-pixel time is assumed uniform
//! across its blocks that pass) and converts them back to per-block costs by
//! pixel count. In deterministic-cost mode durations are composited-term
//! counts instead of wall time, which makes balancing tests reproducible
//! across machines.

use std::collections::HashMap;

use crate::partition::{BlockLayout, PixelPartition};

/// Measured per-block durations for one image in one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub image_id: u32,
    /// One entry per block of the image, row-major; duration units are
    /// nanoseconds (wall mode) or composited terms (deterministic mode).
    pub per_block: Vec<f64>,
}

impl TimingRecord {
    pub fn is_consistent_with(&self, tiles: usize) -> bool {
        self.per_block.len() == tiles && self.per_block.iter().all(|&v| v >= 0.0)
    }
}

/// Last-seen per-block cost estimates per image, pooled per worker.
#[derive(Debug, Clone, Default)]
pub struct CostHistory {
    per_image: HashMap<u32, Vec<f64>>,
    total_cost: f64,
    total_pixels: f64,
}

impl CostHistory {
    pub fn new() -> Self {
        CostHistory::default()
    }

    pub fn has_record(&self, image_id: u32) -> bool {
        self.per_image.contains_key(&image_id)
    }

    /// Folds one iteration's measurements into the history. `durations` is
    /// indexed by global block over the batch row; `image_ids[v]` names the
    /// image rendered in batch slot `v`.
    pub fn record(
        &mut self,
        partition: &PixelPartition,
        image_ids: &[u32],
        durations: &[f64],
    ) {
        let layout = &partition.layout;
        assert_eq!(durations.len(), layout.total_blocks);
        assert_eq!(image_ids.len(), layout.views.len());

        // Pool per worker over the whole iteration.
        let mut worker_cost = vec![0.0f64; partition.workers];
        let mut worker_pixels = vec![0.0f64; partition.workers];
        for b in 0..layout.total_blocks {
            let owner = partition.owner_of_block(b);
            worker_cost[owner] += durations[b];
            worker_pixels[owner] += layout.block_pixels(b) as f64;
        }
        let avg_pp: Vec<f64> = worker_cost
            .iter()
            .zip(&worker_pixels)
            .map(|(&c, &p)| if p > 0.0 { c / p } else { 0.0 })
            .collect();

        for (v, vb) in layout.views.iter().enumerate() {
            let mut et = vec![0.0; vb.tile_count()];
            for (tile, slot) in et.iter_mut().enumerate() {
                let b = vb.block_offset + tile;
                let owner = partition.owner_of_block(b);
                *slot = avg_pp[owner] * layout.block_pixels(b) as f64;
            }
            self.per_image.insert(image_ids[v], et);
        }
        self.total_cost += worker_cost.iter().sum::<f64>();
        self.total_pixels += worker_pixels.iter().sum::<f64>();
    }

    /// Per-block cost estimates over a batch block row. Images never seen
    /// get a uniform per-pixel fill at the historical average rate (or 1.0
    /// on a cold start), so a fresh image yields an equal-cost partition.
    pub fn estimate(&self, layout: &BlockLayout, image_ids: &[u32]) -> Vec<f64> {
        assert_eq!(image_ids.len(), layout.views.len());
        let fill_pp = if self.total_pixels > 0.0 {
            self.total_cost / self.total_pixels
        } else {
            1.0
        };
        let mut et = Vec::with_capacity(layout.total_blocks);
        for (v, vb) in layout.views.iter().enumerate() {
            match self.per_image.get(&image_ids[v]) {
                Some(rec) => et.extend_from_slice(rec),
                None => {
                    for tile in 0..vb.tile_count() {
                        et.push(fill_pp * vb.tile_pixels(tile) as f64);
                    }
                }
            }
        }
        et
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cold_start_gives_uniform_pixel_costs() {
        let history = CostHistory::new();
        let layout = BlockLayout::new(&[(32, 32)]);
        let et = history.estimate(&layout, &[7]);
        assert!(et.iter().all(|&v| (v - 256.0).abs() < 1e-12));
    }

    #[test]
    fn per_pixel_averaging_rule() {
        // Worker 0 spends 2s on its 2 blocks, worker 1 spends 1s on its 2:
        // estimates become [1, 1, 0.5, 0.5] seconds.
        let layout = BlockLayout::new(&[(64, 16)]);
        let part = PixelPartition {
            layout: layout.clone(),
            workers: 2,
            dp: vec![0, 2],
        };
        let mut history = CostHistory::new();
        history.record(&part, &[3], &[1.5e9, 0.5e9, 0.2e9, 0.8e9]);
        let et = history.estimate(&layout, &[3]);
        assert_eq!(et, vec![1.0e9, 1.0e9, 0.5e9, 0.5e9]);
    }

    #[test]
    fn unseen_image_mixed_with_seen_uses_average_rate() {
        let layout = BlockLayout::new(&[(32, 16)]);
        let part = PixelPartition {
            layout: layout.clone(),
            workers: 1,
            dp: vec![0],
        };
        let mut history = CostHistory::new();
        history.record(&part, &[0], &[512.0, 512.0]);
        // Average rate is 2 units per pixel.
        let batch = BlockLayout::new(&[(32, 16), (32, 16)]);
        let et = history.estimate(&batch, &[0, 9]);
        assert_eq!(&et[0..2], &[512.0, 512.0]);
        assert_eq!(&et[2..4], &[512.0, 512.0]);
    }

    #[test]
    fn reseen_image_reuses_last_record() {
        let layout = BlockLayout::new(&[(32, 16)]);
        let part = PixelPartition {
            layout: layout.clone(),
            workers: 1,
            dp: vec![0],
        };
        let mut history = CostHistory::new();
        history.record(&part, &[4], &[100.0, 300.0]);
        history.record(&part, &[4], &[700.0, 100.0]);
        let et = history.estimate(&layout, &[4]);
        // Pooled per worker: one worker, so uniform per pixel at rate
        // 800/512; both blocks get 400.
        assert_eq!(et, vec![400.0, 400.0]);
    }
}
