//! Tile-based alpha compositing over 16x16 pixel blocks.
//!
//! Rendering walks each owned tile's depth-sorted gaussian list front-to-back
//! per pixel, compositing until the transmittance threshold is reached. The
//! backward pass replays the same walk back-to-front, reconstructing
//! transmittances from the saved per-pixel state. Per-block wall time and
//! composited-term counts are recorded for the load balancer.

use std::time::Instant;

use crate::image::ImageF;
use crate::project::{ProjectedGrads, ProjectedShard};

/// Pixel block edge length; blocks are the scheduling granularity.
pub const BLOCK: usize = 16;

#[derive(Debug, Clone, Copy)]
pub struct RasterConfig {
    /// Contributions with alpha below this are skipped.
    pub alpha_min: f64,
    /// Alpha values are capped here before compositing.
    pub alpha_cap: f64,
    /// Front-to-back traversal stops once transmittance falls below this.
    pub transmittance_min: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            alpha_min: 1.0 / 255.0,
            alpha_cap: 0.99,
            transmittance_min: 1e-4,
        }
    }
}

/// Tile grid dimensions for an image (ceil division by [`BLOCK`]).
pub fn tile_dims(width: u32, height: u32) -> (usize, usize) {
    (
        (width as usize).div_ceil(BLOCK),
        (height as usize).div_ceil(BLOCK),
    )
}

/// Inclusive tile index rectangle overlapped by a footprint square
/// `[mean +- radius]`, or `None` if it misses the grid. Overlap is strict:
/// a footprint merely touching a tile edge does not enter the tile.
pub fn footprint_tiles(
    mean2d: [f64; 2],
    radius: f64,
    tiles_x: usize,
    tiles_y: usize,
) -> Option<(usize, usize, usize, usize)> {
    let b = BLOCK as f64;
    let lo = |m: f64| ((m - radius) / b).floor() as i64;
    let hi = |m: f64| ((m + radius) / b).ceil() as i64 - 1;
    let (tx0, tx1) = (lo(mean2d[0]).max(0), hi(mean2d[0]).min(tiles_x as i64 - 1));
    let (ty0, ty1) = (lo(mean2d[1]).max(0), hi(mean2d[1]).min(tiles_y as i64 - 1));
    if tx0 > tx1 || ty0 > ty1 {
        return None;
    }
    Some((tx0 as usize, tx1 as usize, ty0 as usize, ty1 as usize))
}

/// Per-view block ownership mask (the `compute_locally` array).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub owned: Vec<bool>,
}

impl BlockMask {
    pub fn all(width: u32, height: u32) -> Self {
        let (tx, ty) = tile_dims(width, height);
        BlockMask {
            tiles_x: tx,
            tiles_y: ty,
            owned: vec![true; tx * ty],
        }
    }

    pub fn none(width: u32, height: u32) -> Self {
        let (tx, ty) = tile_dims(width, height);
        BlockMask {
            tiles_x: tx,
            tiles_y: ty,
            owned: vec![false; tx * ty],
        }
    }

    #[inline]
    pub fn is_owned(&self, tx: usize, ty: usize) -> bool {
        self.owned[ty * self.tiles_x + tx]
    }

    pub fn tile_count(&self) -> usize {
        self.owned.len()
    }
}

/// Depth-sorted gaussian lists per tile; only tiles owned by the mask used to
/// build the buffer have entries.
#[derive(Debug, Clone)]
pub struct TileZBuffer {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Indices into the projected arrays, ascending by (depth, global id).
    pub lists: Vec<Vec<u32>>,
}

/// Builds the per-tile Z-buffer from projected attributes. `gids` are the
/// stable global gaussian ids used to break depth ties deterministically.
pub fn build_tile_lists(shard: &ProjectedShard, gids: &[u64], mask: &BlockMask) -> TileZBuffer {
    assert_eq!(shard.len(), gids.len());
    let mut lists = vec![Vec::new(); mask.tile_count()];
    for i in 0..shard.len() {
        if !shard.visible[i] {
            continue;
        }
        let Some((tx0, tx1, ty0, ty1)) =
            footprint_tiles(shard.mean2d[i], shard.radius[i], mask.tiles_x, mask.tiles_y)
        else {
            continue;
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                if mask.is_owned(tx, ty) {
                    lists[ty * mask.tiles_x + tx].push(i as u32);
                }
            }
        }
    }
    for list in &mut lists {
        list.sort_by(|&a, &b| {
            shard.depth[a as usize]
                .partial_cmp(&shard.depth[b as usize])
                .unwrap()
                .then(gids[a as usize].cmp(&gids[b as usize]))
        });
    }
    TileZBuffer {
        tiles_x: mask.tiles_x,
        tiles_y: mask.tiles_y,
        lists,
    }
}

/// Per-pixel compositing state saved by the forward pass for backward.
#[derive(Debug, Clone)]
pub struct RenderAux {
    pub width: u32,
    pub height: u32,
    /// Final transmittance after the last contribution.
    pub final_t: Vec<f64>,
    /// Number of gaussians that actually contributed.
    pub n_contrib: Vec<u32>,
    /// One past the tile-list position of the last contributor.
    pub last_pos: Vec<u32>,
}

impl RenderAux {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        RenderAux {
            width,
            height,
            final_t: vec![1.0; n],
            n_contrib: vec![0; n],
            last_pos: vec![0; n],
        }
    }
}

/// Forward render and cost measurement of one pixel block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockTiming {
    /// Tile index (`ty * tiles_x + tx`) within the view.
    pub tile: usize,
    pub nanos: u64,
    /// Composited terms in this block; machine-independent cost proxy.
    pub terms: u64,
}

#[inline]
fn gaussian_alpha(
    cfg: &RasterConfig,
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    px: f64,
    py: f64,
) -> Option<(f64, bool)> {
    let dx = px - mean[0];
    let dy = py - mean[1];
    let power = -0.5 * (conic[0] * dx * dx + conic[2] * dy * dy) - conic[1] * dx * dy;
    if power > 0.0 {
        return None;
    }
    let raw = opacity * power.exp();
    let alpha = raw.min(cfg.alpha_cap);
    if alpha < cfg.alpha_min {
        return None;
    }
    Some((alpha, raw < cfg.alpha_cap))
}

/// Composites every owned block into `img`, filling `aux` and returning one
/// timing entry per owned block. `img` and `aux` must be full-size buffers;
/// unowned pixels are left untouched.
pub fn render_forward(
    zbuf: &TileZBuffer,
    shard: &ProjectedShard,
    mask: &BlockMask,
    background: [f64; 3],
    cfg: &RasterConfig,
    img: &mut ImageF,
    aux: &mut RenderAux,
) -> Vec<BlockTiming> {
    assert_eq!(mask.tile_count(), zbuf.lists.len());
    let width = img.width;
    let height = img.height;
    let mut timings = Vec::new();
    for ty in 0..zbuf.tiles_y {
        for tx in 0..zbuf.tiles_x {
            if !mask.is_owned(tx, ty) {
                continue;
            }
            let tile = ty * zbuf.tiles_x + tx;
            let list = &zbuf.lists[tile];
            let started = Instant::now();
            let mut terms = 0u64;
            let x_end = ((tx + 1) * BLOCK).min(width as usize) as u32;
            let y_end = ((ty + 1) * BLOCK).min(height as usize) as u32;
            for y in (ty * BLOCK) as u32..y_end {
                for x in (tx * BLOCK) as u32..x_end {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut color = [0.0f64; 3];
                    let mut n_contrib = 0u32;
                    let mut last = 0u32;
                    for (pos, &gi) in list.iter().enumerate() {
                        let g = gi as usize;
                        let Some((alpha, _)) = gaussian_alpha(
                            cfg,
                            shard.mean2d[g],
                            shard.conic[g],
                            shard.opacity[g],
                            px,
                            py,
                        ) else {
                            continue;
                        };
                        let w = t * alpha;
                        for c in 0..3 {
                            color[c] += w * shard.rgb[g][c];
                        }
                        t *= 1.0 - alpha;
                        n_contrib += 1;
                        last = pos as u32 + 1;
                        terms += 1;
                        if t < cfg.transmittance_min {
                            break;
                        }
                    }
                    for c in 0..3 {
                        color[c] += t * background[c];
                    }
                    let pi = img.idx(x, y);
                    img.data[pi] = color;
                    aux.final_t[pi] = t;
                    aux.n_contrib[pi] = n_contrib;
                    aux.last_pos[pi] = last;
                }
            }
            timings.push(BlockTiming {
                tile,
                nanos: started.elapsed().as_nanos() as u64,
                terms,
            });
        }
    }
    let _ = height;
    timings
}

/// Backward of [`render_forward`]: accumulates per-pixel color gradients
/// onto the projected attributes. Gradients land in `grads` (indexed like
/// `shard`); timing entries mirror the forward convention.
pub fn render_backward(
    grad_pixels: &ImageF,
    zbuf: &TileZBuffer,
    shard: &ProjectedShard,
    mask: &BlockMask,
    background: [f64; 3],
    cfg: &RasterConfig,
    aux: &RenderAux,
    grads: &mut ProjectedGrads,
) -> Vec<BlockTiming> {
    assert_eq!(grads.len(), shard.len(), "grads/shard shape mismatch");
    assert_eq!(aux.width, grad_pixels.width);
    assert_eq!(aux.height, grad_pixels.height);
    let width = grad_pixels.width;
    let height = grad_pixels.height;
    let mut timings = Vec::new();
    for ty in 0..zbuf.tiles_y {
        for tx in 0..zbuf.tiles_x {
            if !mask.is_owned(tx, ty) {
                continue;
            }
            let tile = ty * zbuf.tiles_x + tx;
            let list = &zbuf.lists[tile];
            let started = Instant::now();
            let mut terms = 0u64;
            let x_end = ((tx + 1) * BLOCK).min(width as usize) as u32;
            let y_end = ((ty + 1) * BLOCK).min(height as usize) as u32;
            for y in (ty * BLOCK) as u32..y_end {
                for x in (tx * BLOCK) as u32..x_end {
                    let pi = (y * width + x) as usize;
                    let g_pix = grad_pixels.data[pi];
                    if g_pix == [0.0; 3] {
                        continue;
                    }
                    let last = aux.last_pos[pi] as usize;
                    if last == 0 {
                        // No contributors; the background term carries no
                        // attribute gradient.
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t_run = aux.final_t[pi];
                    // Suffix sum of weighted colors behind the current
                    // gaussian, seeded with the background term.
                    let mut suffix = [
                        t_run * background[0],
                        t_run * background[1],
                        t_run * background[2],
                    ];
                    for pos in (0..last).rev() {
                        let g = list[pos] as usize;
                        let Some((alpha, uncapped)) = gaussian_alpha(
                            cfg,
                            shard.mean2d[g],
                            shard.conic[g],
                            shard.opacity[g],
                            px,
                            py,
                        ) else {
                            continue;
                        };
                        terms += 1;
                        // Transmittance in front of this contribution.
                        let t_before = t_run / (1.0 - alpha);
                        let w = t_before * alpha;
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            grads.rgb[g][c] += g_pix[c] * w;
                            d_alpha += g_pix[c]
                                * (t_before * shard.rgb[g][c] - suffix[c] / (1.0 - alpha));
                            suffix[c] += w * shard.rgb[g][c];
                        }
                        if uncapped {
                            let e = alpha / shard.opacity[g];
                            grads.opacity[g] += d_alpha * e;
                            let d_power = d_alpha * alpha;
                            let dx = px - shard.mean2d[g][0];
                            let dy = py - shard.mean2d[g][1];
                            grads.conic[g][0] += d_power * (-0.5 * dx * dx);
                            grads.conic[g][1] += d_power * (-dx * dy);
                            grads.conic[g][2] += d_power * (-0.5 * dy * dy);
                            let [ca, cb, cc] = shard.conic[g];
                            grads.mean2d[g][0] += d_power * (ca * dx + cb * dy);
                            grads.mean2d[g][1] += d_power * (cb * dx + cc * dy);
                        }
                        t_run = t_before;
                    }
                }
            }
            timings.push(BlockTiming {
                tile,
                nanos: started.elapsed().as_nanos() as u64,
                terms,
            });
        }
    }
    let _ = height;
    timings
}
