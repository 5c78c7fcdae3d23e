//! Pixel-wise work partitioning: the serialized block row over a batch of
//! views, and the division-point calculation that balances estimated
//! per-block cost across workers.

use grendel_core::raster::{tile_dims, BlockMask, BLOCK};

/// Block grid of one view inside the batch block row.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBlocks {
    pub width: u32,
    pub height: u32,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Index of this view's first block in the concatenated row.
    pub block_offset: usize,
}

impl ViewBlocks {
    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Actual pixel count of a tile, accounting for partial edge blocks.
    pub fn tile_pixels(&self, tile: usize) -> usize {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let w = (self.width as usize - tx * BLOCK).min(BLOCK);
        let h = (self.height as usize - ty * BLOCK).min(BLOCK);
        w * h
    }
}

/// Serialized 16x16 block row over all views of a batch, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub views: Vec<ViewBlocks>,
    pub total_blocks: usize,
}

impl BlockLayout {
    pub fn new(dims: &[(u32, u32)]) -> Self {
        let mut views = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for &(w, h) in dims {
            let (tx, ty) = tile_dims(w, h);
            views.push(ViewBlocks {
                width: w,
                height: h,
                tiles_x: tx,
                tiles_y: ty,
                block_offset: offset,
            });
            offset += tx * ty;
        }
        BlockLayout {
            views,
            total_blocks: offset,
        }
    }

    /// Maps a global block index to (view index, tile index within view).
    pub fn locate(&self, block: usize) -> (usize, usize) {
        debug_assert!(block < self.total_blocks);
        // Batch sizes are small; linear scan is fine.
        for (v, vb) in self.views.iter().enumerate() {
            if block < vb.block_offset + vb.tile_count() {
                return (v, block - vb.block_offset);
            }
        }
        unreachable!("block {block} out of range {}", self.total_blocks)
    }

    pub fn block_pixels(&self, block: usize) -> usize {
        let (v, tile) = self.locate(block);
        self.views[v].tile_pixels(tile)
    }

    pub fn global_block(&self, view: usize, tile: usize) -> usize {
        self.views[view].block_offset + tile
    }
}

/// Division points over a block row: worker `g` owns blocks
/// `[dp[g], dp[g+1])` with an implicit `dp[G] = B`. Thresholds are laid on
/// the cumulative cost curve and located with a right bisect (count of
/// prefix sums at or below the threshold), so exact-threshold ties fall to
/// the earlier worker and an all-equal cost vector splits evenly.
pub fn compute_division_points(et: &[f64], workers: usize) -> Vec<usize> {
    assert!(workers >= 1);
    let b = et.len();
    assert!(b >= 1, "empty block row");
    debug_assert!(et.iter().all(|&v| v >= 0.0), "negative block cost");
    let total: f64 = et.iter().sum();
    if total <= 0.0 {
        // No cost signal: uniform block-count split.
        return (0..workers).map(|g| g * b / workers).collect();
    }
    let mut ct = Vec::with_capacity(b);
    let mut acc = 0.0;
    for &v in et {
        acc += v;
        ct.push(acc);
    }
    let per_worker = acc / workers as f64;
    let mut dp = Vec::with_capacity(workers);
    dp.push(0);
    for g in 1..workers {
        let th = g as f64 * per_worker;
        dp.push(ct.partition_point(|&c| c <= th));
    }
    dp
}

/// The per-iteration pixel partition: division points plus derived
/// per-worker ownership masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPartition {
    pub layout: BlockLayout,
    pub workers: usize,
    pub dp: Vec<usize>,
}

impl PixelPartition {
    pub fn new(layout: BlockLayout, workers: usize, et: &[f64]) -> Self {
        assert_eq!(et.len(), layout.total_blocks);
        let dp = compute_division_points(et, workers);
        PixelPartition {
            layout,
            workers,
            dp,
        }
    }

    pub fn uniform(layout: BlockLayout, workers: usize) -> Self {
        let dp = (0..workers)
            .map(|g| g * layout.total_blocks / workers)
            .collect();
        PixelPartition {
            layout,
            workers,
            dp,
        }
    }

    /// Blocks owned by `rank` as a global block range.
    pub fn blocks_of(&self, rank: usize) -> std::ops::Range<usize> {
        let lo = self.dp[rank];
        let hi = if rank + 1 < self.workers {
            self.dp[rank + 1]
        } else {
            self.layout.total_blocks
        };
        lo..hi
    }

    /// Owning worker of a global block. Blocks on a shared boundary of empty
    /// partitions belong to the later worker.
    pub fn owner_of_block(&self, block: usize) -> usize {
        debug_assert!(block < self.layout.total_blocks);
        self.dp.partition_point(|&d| d <= block) - 1
    }

    /// The `compute_locally` mask of `rank` for one view of the batch.
    pub fn mask_for(&self, rank: usize, view: usize) -> BlockMask {
        let vb = &self.layout.views[view];
        let mut mask = BlockMask::none(vb.width, vb.height);
        let owned = self.blocks_of(rank);
        let lo = owned.start.max(vb.block_offset);
        let hi = owned.end.min(vb.block_offset + vb.tile_count());
        for b in lo..hi {
            mask.owned[b - vb.block_offset] = true;
        }
        mask
    }

    /// Per-pixel ownership mask of `rank` for one view.
    pub fn pixel_mask(&self, rank: usize, view: usize) -> Vec<bool> {
        let vb = &self.layout.views[view];
        let mask = self.mask_for(rank, view);
        let mut pixels = vec![false; vb.width as usize * vb.height as usize];
        for ty in 0..vb.tiles_y {
            for tx in 0..vb.tiles_x {
                if !mask.is_owned(tx, ty) {
                    continue;
                }
                let x_end = ((tx + 1) * BLOCK).min(vb.width as usize);
                let y_end = ((ty + 1) * BLOCK).min(vb.height as usize);
                for y in ty * BLOCK..y_end {
                    for x in tx * BLOCK..x_end {
                        pixels[y * vb.width as usize + x] = true;
                    }
                }
            }
        }
        pixels
    }

    pub fn owner_of_pixel(&self, view: usize, x: u32, y: u32) -> usize {
        let vb = &self.layout.views[view];
        let tile = (y as usize / BLOCK) * vb.tiles_x + x as usize / BLOCK;
        self.owner_of_block(vb.block_offset + tile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_costs_split_in_halves() {
        assert_eq!(compute_division_points(&[1.0, 1.0, 1.0, 1.0], 2), vec![0, 2]);
    }

    #[test]
    fn hand_traced_division() {
        // Cumulative [3,4,5,6,8], threshold 4 -> two blocks for worker 0,
        // loads (4, 4).
        assert_eq!(compute_division_points(&[3.0, 1.0, 1.0, 1.0, 2.0], 2), vec![0, 2]);
    }

    #[test]
    fn single_worker_owns_everything() {
        assert_eq!(compute_division_points(&[5.0, 2.0, 1.0], 1), vec![0]);
    }

    #[test]
    fn dominant_first_block_leaves_worker_empty() {
        let dp = compute_division_points(&[5.0, 1.0, 1.0, 1.0], 2);
        assert_eq!(dp, vec![0, 0]);
        let layout = BlockLayout::new(&[(64, 16)]);
        let part = PixelPartition {
            layout,
            workers: 2,
            dp,
        };
        assert_eq!(part.blocks_of(0), 0..0);
        assert_eq!(part.blocks_of(1), 0..4);
        assert_eq!(part.owner_of_block(0), 1);
    }

    #[test]
    fn all_zero_costs_fall_back_to_uniform() {
        assert_eq!(compute_division_points(&[0.0; 8], 4), vec![0, 2, 4, 6]);
    }

    #[test]
    fn masks_tile_batch_exactly() {
        let layout = BlockLayout::new(&[(48, 32), (48, 32)]);
        let et: Vec<f64> = (0..layout.total_blocks).map(|i| (i % 5) as f64 + 0.5).collect();
        let part = PixelPartition::new(layout.clone(), 3, &et);
        for view in 0..2 {
            let vb = &layout.views[view];
            let mut coverage = vec![0u32; vb.tile_count()];
            for rank in 0..3 {
                let mask = part.mask_for(rank, view);
                for (t, &owned) in mask.owned.iter().enumerate() {
                    if owned {
                        coverage[t] += 1;
                    }
                }
            }
            assert!(coverage.iter().all(|&c| c == 1), "coverage {coverage:?}");
        }
    }

    #[test]
    fn partial_edge_blocks_have_true_pixel_counts() {
        let layout = BlockLayout::new(&[(40, 20)]);
        // 3x2 tiles; rightmost column is 8 wide, bottom row is 4 tall.
        assert_eq!(layout.block_pixels(0), 256);
        assert_eq!(layout.block_pixels(2), 8 * 16);
        assert_eq!(layout.block_pixels(3), 16 * 4);
        assert_eq!(layout.block_pixels(5), 8 * 4);
        let total: usize = (0..layout.total_blocks).map(|b| layout.block_pixels(b)).sum();
        assert_eq!(total, 40 * 20);
    }

    #[test]
    fn load_bound_on_random_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let b = rng.random_range(1..=256);
            let g = rng.random_range(1..=16);
            let et: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..10.0)).collect();
            let total: f64 = et.iter().sum();
            let max_et = et.iter().cloned().fold(0.0, f64::max);
            let dp = compute_division_points(&et, g);
            let mut max_load = 0.0f64;
            for w in 0..g {
                let lo = dp[w];
                let hi = if w + 1 < g { dp[w + 1] } else { b };
                let load: f64 = et[lo..hi].iter().sum();
                max_load = max_load.max(load);
            }
            assert!(
                max_load <= total / g as f64 + max_et + 1e-9 * total.max(1.0),
                "bound violated: max {max_load}, total/g {} + max {max_et}",
                total / g as f64
            );
        }
    }
}
