//! One simulated worker: a shard of gaussians plus the per-iteration phase
//! methods the engine drives between collectives.
//!
//! A training step runs five phases per worker with four collectives in
//! between: (1) transform the shard for every batch view and post the sparse
//! all-to-all payloads; (2) receive, build tile lists, render owned blocks,
//! and post SSIM halo strips; (3) compute loss forward/backward over owned
//! centers and post halo gradients; (4) run render backward and post
//! attribute gradients to the gaussian owners; (5) sum received gradients in
//! rank order, run the projection backward per view, reduce over the batch,
//! and take the Adam step.

use std::sync::Arc;
use std::time::Instant;

use grendel_core::adam::{adam_step, ScaledHyperParams};
use grendel_core::camera::CameraView;
use grendel_core::cloud::CloudGrads;
use grendel_core::image::ImageF;
use grendel_core::loss::{l1_loss_scaled, ssim_scaled, LossConfig};
use grendel_core::project::{
    transform_backward, transform_gaussians, ProjectedGrads, ProjectedShard, ProjectionConfig,
};
use grendel_core::raster::{
    build_tile_lists, footprint_tiles, render_backward, render_forward, BlockMask, RasterConfig,
    RenderAux, TileZBuffer, BLOCK,
};

use crate::error::EngineError;
use crate::exchange::build_exchange_plan;
use crate::partition::PixelPartition;
use crate::shard::Shard;
use crate::topology::{AttrGradEntry, HaloPixel, Msg, ProjEntry, Transport};

/// Shared read-only context for one training step.
pub struct StepCtx<'a> {
    pub views: &'a [CameraView],
    pub targets: &'a [Arc<ImageF>],
    pub partition: &'a PixelPartition,
    pub transport: &'a dyn Transport,
    pub proj: ProjectionConfig,
    pub raster: RasterConfig,
    pub loss: LossConfig,
    pub background: [f64; 3],
    pub scaled: ScaledHyperParams,
    pub optimize: bool,
}

/// Cost measurement for one block of one batch view.
#[derive(Debug, Clone, Copy)]
pub struct CostSample {
    pub view: usize,
    pub tile: usize,
    pub nanos: u64,
    pub terms: u64,
}

/// Projected gaussians received from the forward all-to-all, with the
/// provenance needed to route gradients back.
#[derive(Debug, Default)]
struct RecvSet {
    shard: ProjectedShard,
    gids: Vec<u64>,
    provenance: Vec<(u32, u32)>,
}

pub struct WorkerState {
    pub rank: usize,
    pub shard: Shard,
    projected: Vec<ProjectedShard>,
    recv: Vec<RecvSet>,
    masks: Vec<BlockMask>,
    zbufs: Vec<TileZBuffer>,
    images: Vec<ImageF>,
    auxes: Vec<RenderAux>,
    grad_images: Vec<ImageF>,
    halo_fills: Vec<Vec<u32>>,
    pub cost_samples: Vec<CostSample>,
    /// Per batch view: (l1 partial, ssim partial), both normalized by the
    /// whole image so partials sum to per-image values across workers.
    pub loss_parts: Vec<(f64, f64)>,
    pub sent_entries: u64,
    pub received_entries: u64,
    pub false_deliveries: u64,
}

impl WorkerState {
    pub fn new(rank: usize, shard: Shard) -> Self {
        WorkerState {
            rank,
            shard,
            projected: Vec::new(),
            recv: Vec::new(),
            masks: Vec::new(),
            zbufs: Vec::new(),
            images: Vec::new(),
            auxes: Vec::new(),
            grad_images: Vec::new(),
            halo_fills: Vec::new(),
            cost_samples: Vec::new(),
            loss_parts: Vec::new(),
            sent_entries: 0,
            received_entries: 0,
            false_deliveries: 0,
        }
    }

    /// Phase 1: gaussian-wise transformation and forward all-to-all posting.
    pub fn phase_transform(&mut self, ctx: &StepCtx) -> Result<(), EngineError> {
        let b = ctx.views.len();
        self.cost_samples.clear();
        self.loss_parts.clear();
        self.false_deliveries = 0;
        self.projected.clear();
        for view in ctx.views {
            self.projected
                .push(transform_gaussians(&self.shard.cloud, view, &ctx.proj)?);
        }
        let plan = build_exchange_plan(&self.projected, ctx.partition);
        self.sent_entries = plan.total_entries();
        for dst in 0..ctx.transport.workers() {
            let entries: Vec<ProjEntry> = plan.sends[dst]
                .iter()
                .map(|&(v, i)| {
                    let shard = &self.projected[v as usize];
                    let i = i as usize;
                    ProjEntry {
                        view: v,
                        src_local: i as u32,
                        gid: self.shard.gids[i],
                        mean2d: shard.mean2d[i],
                        depth: shard.depth[i],
                        radius: shard.radius[i],
                        conic: shard.conic[i],
                        rgb: shard.rgb[i],
                        opacity: shard.opacity[i],
                    }
                })
                .collect();
            ctx.transport.send(self.rank, dst, Msg::Projected(entries));
        }
        let _ = b;
        Ok(())
    }

    /// Phase 2: receive intersecting gaussians, render owned blocks, post
    /// halo strips of rendered pixels to neighbors that need them for SSIM.
    pub fn phase_render(&mut self, ctx: &StepCtx) -> Result<(), EngineError> {
        let b = ctx.views.len();
        self.recv = (0..b).map(|_| RecvSet::default()).collect();
        self.received_entries = 0;
        self.masks = (0..b)
            .map(|v| ctx.partition.mask_for(self.rank, v))
            .collect();
        for (_src, msg) in ctx.transport.drain(self.rank) {
            let Msg::Projected(entries) = msg else {
                panic!("unexpected message kind in forward exchange");
            };
            for e in entries {
                let set = &mut self.recv[e.view as usize];
                // Sparsity invariant: the footprint must overlap an owned
                // block, otherwise the sender misrouted it.
                let mask = &self.masks[e.view as usize];
                let overlaps = footprint_tiles(e.mean2d, e.radius, mask.tiles_x, mask.tiles_y)
                    .map(|(tx0, tx1, ty0, ty1)| {
                        (ty0..=ty1)
                            .any(|ty| (tx0..=tx1).any(|tx| mask.is_owned(tx, ty)))
                    })
                    .unwrap_or(false);
                if !overlaps {
                    self.false_deliveries += 1;
                }
                set.shard.mean2d.push(e.mean2d);
                set.shard.depth.push(e.depth);
                set.shard.radius.push(e.radius);
                set.shard.conic.push(e.conic);
                set.shard.rgb.push(e.rgb);
                set.shard.opacity.push(e.opacity);
                set.shard.visible.push(true);
                set.gids.push(e.gid);
                set.provenance.push((_src as u32, e.src_local));
                self.received_entries += 1;
            }
        }

        self.zbufs = Vec::with_capacity(b);
        self.images = Vec::with_capacity(b);
        self.auxes = Vec::with_capacity(b);
        for v in 0..b {
            let view = &ctx.views[v];
            let set = &self.recv[v];
            let zbuf = build_tile_lists(&set.shard, &set.gids, &self.masks[v]);
            let mut img = ImageF::filled(view.width, view.height, f64::NAN);
            let mut aux = RenderAux::new(view.width, view.height);
            let timings = render_forward(
                &zbuf,
                &set.shard,
                &self.masks[v],
                ctx.background,
                &ctx.raster,
                &mut img,
                &mut aux,
            );
            for t in timings {
                self.cost_samples.push(CostSample {
                    view: v,
                    tile: t.tile,
                    nanos: t.nanos,
                    terms: t.terms,
                });
            }
            self.zbufs.push(zbuf);
            self.images.push(img);
            self.auxes.push(aux);
        }

        // Post halo strips: pixels this worker owns that sit within the SSIM
        // window reach of another worker's owned region.
        for dst in 0..ctx.transport.workers() {
            let pixels = if dst == self.rank {
                Vec::new()
            } else {
                self.halo_pixels_for(ctx, dst)
            };
            ctx.transport.send(self.rank, dst, Msg::Halo(pixels));
        }
        Ok(())
    }

    /// Owned pixels within window reach (5 px Chebyshev) of `dst`'s region.
    fn halo_pixels_for(&self, ctx: &StepCtx, dst: usize) -> Vec<HaloPixel> {
        let reach = grendel_core::loss::SSIM_RADIUS as i64;
        let mut out = Vec::new();
        for (v, view) in ctx.views.iter().enumerate() {
            let mine = &self.masks[v];
            let theirs = ctx.partition.mask_for(dst, v);
            if theirs.owned.iter().all(|&o| !o) {
                continue;
            }
            for ty in 0..mine.tiles_y {
                for tx in 0..mine.tiles_x {
                    if !mine.is_owned(tx, ty) {
                        continue;
                    }
                    let x_end = ((tx + 1) * BLOCK).min(view.width as usize);
                    let y_end = ((ty + 1) * BLOCK).min(view.height as usize);
                    for y in (ty * BLOCK)..y_end {
                        for x in (tx * BLOCK)..x_end {
                            if pixel_near_region(&theirs, view, x as i64, y as i64, reach) {
                                let pixel = (y * view.width as usize + x) as u32;
                                out.push(HaloPixel {
                                    view: v as u32,
                                    pixel,
                                    rgb: self.images[v].data[pixel as usize],
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Phase 3: fill halos, compute L1 + SSIM over owned centers with their
    /// gradients, and post gradient contributions for non-owned pixels.
    pub fn phase_loss(&mut self, ctx: &StepCtx) -> Result<(), EngineError> {
        let b = ctx.views.len();
        self.halo_fills = vec![Vec::new(); b];
        for (_src, msg) in ctx.transport.drain(self.rank) {
            let Msg::Halo(pixels) = msg else {
                panic!("unexpected message kind in halo exchange");
            };
            for p in pixels {
                self.images[p.view as usize].data[p.pixel as usize] = p.rgb;
                self.halo_fills[p.view as usize].push(p.pixel);
            }
        }

        self.grad_images = Vec::with_capacity(b);
        for v in 0..b {
            let view = &ctx.views[v];
            let started = Instant::now();
            let pixel_mask = ctx.partition.pixel_mask(self.rank, v);
            let denom = view.pixel_count() as f64;
            let (l1, l1_grad) =
                l1_loss_scaled(&self.images[v], &ctx.targets[v], Some(&pixel_mask), denom)?;
            let w = ctx.loss.ssim_weight;
            let (ssim_part, grad) = if w > 0.0 {
                let (s, s_grad) = ssim_scaled(
                    &self.images[v],
                    &ctx.targets[v],
                    Some(&pixel_mask),
                    denom,
                    &ctx.loss,
                )?;
                let mut g = l1_grad;
                for (gp, sp) in g.data.iter_mut().zip(&s_grad.data) {
                    for c in 0..3 {
                        gp[c] = (1.0 - w) * gp[c] - w * sp[c];
                    }
                }
                (s, g)
            } else {
                (0.0, l1_grad)
            };
            self.loss_parts.push((l1, ssim_part));
            self.grad_images.push(grad);

            // Loss cost is uniform per pixel; attribute wall time to owned
            // blocks by pixel count. Deterministic-cost mode measures
            // composited terms, which the loss does not add to.
            let nanos = started.elapsed().as_nanos() as u64;
            let owned_pixels: usize = self.masks[v]
                .owned
                .iter()
                .enumerate()
                .filter(|(_, &o)| o)
                .map(|(t, _)| ctx.partition.layout.views[v].tile_pixels(t))
                .sum();
            if owned_pixels > 0 {
                for (t, &owned) in self.masks[v].owned.iter().enumerate() {
                    if owned {
                        let share = ctx.partition.layout.views[v].tile_pixels(t) as f64
                            / owned_pixels as f64;
                        self.cost_samples.push(CostSample {
                            view: v,
                            tile: t,
                            nanos: (nanos as f64 * share) as u64,
                            terms: 0,
                        });
                    }
                }
            }
        }

        // Route halo-pixel gradients back to their owners.
        let workers = ctx.transport.workers();
        let mut buckets: Vec<Vec<HaloPixel>> = vec![Vec::new(); workers];
        for v in 0..b {
            let view = &ctx.views[v];
            for &pixel in &self.halo_fills[v] {
                let g = self.grad_images[v].data[pixel as usize];
                if g == [0.0; 3] {
                    continue;
                }
                let (x, y) = (
                    pixel % view.width,
                    pixel / view.width,
                );
                let owner = ctx.partition.owner_of_pixel(v, x, y);
                buckets[owner].push(HaloPixel {
                    view: v as u32,
                    pixel,
                    rgb: g,
                });
            }
        }
        for (dst, bucket) in buckets.into_iter().enumerate() {
            ctx.transport.send(self.rank, dst, Msg::HaloGrad(bucket));
        }
        Ok(())
    }

    /// Phase 4: merge halo gradients, run render backward over owned blocks,
    /// and post per-attribute gradients back to the gaussian owners.
    pub fn phase_render_backward(&mut self, ctx: &StepCtx) -> Result<(), EngineError> {
        let b = ctx.views.len();
        for (_src, msg) in ctx.transport.drain(self.rank) {
            let Msg::HaloGrad(pixels) = msg else {
                panic!("unexpected message kind in halo-gradient exchange");
            };
            for p in pixels {
                let slot = &mut self.grad_images[p.view as usize].data[p.pixel as usize];
                for c in 0..3 {
                    slot[c] += p.rgb[c];
                }
            }
        }

        let workers = ctx.transport.workers();
        let mut buckets: Vec<Vec<AttrGradEntry>> = vec![Vec::new(); workers];
        for v in 0..b {
            let set = &self.recv[v];
            let mut pgrads = ProjectedGrads::zeros(set.shard.len());
            let timings = render_backward(
                &self.grad_images[v],
                &self.zbufs[v],
                &set.shard,
                &self.masks[v],
                ctx.background,
                &ctx.raster,
                &self.auxes[v],
                &mut pgrads,
            );
            for t in timings {
                self.cost_samples.push(CostSample {
                    view: v,
                    tile: t.tile,
                    nanos: t.nanos,
                    terms: t.terms,
                });
            }
            for j in 0..set.shard.len() {
                let (src, src_local) = set.provenance[j];
                buckets[src as usize].push(AttrGradEntry {
                    view: v as u32,
                    local: src_local,
                    mean2d: pgrads.mean2d[j],
                    conic: pgrads.conic[j],
                    rgb: pgrads.rgb[j],
                    opacity: pgrads.opacity[j],
                });
            }
        }
        for (dst, bucket) in buckets.into_iter().enumerate() {
            ctx.transport.send(self.rank, dst, Msg::AttrGrads(bucket));
        }
        Ok(())
    }

    /// Phase 5: sum attribute gradients in source-rank order, chain through
    /// the projection backward per view, average over the batch, accumulate
    /// densification statistics, and step the optimizer.
    pub fn phase_apply(&mut self, ctx: &StepCtx) -> Result<(), EngineError> {
        let b = ctx.views.len();
        let n = self.shard.len();
        let mut per_view: Vec<ProjectedGrads> =
            (0..b).map(|_| ProjectedGrads::zeros(n)).collect();
        for (_src, msg) in ctx.transport.drain(self.rank) {
            let Msg::AttrGrads(entries) = msg else {
                panic!("unexpected message kind in backward exchange");
            };
            for e in entries {
                e.add_into(&mut per_view[e.view as usize]);
            }
        }

        let mut total = CloudGrads::zeros(n);
        for v in 0..b {
            let grads_v = transform_backward(
                &per_view[v],
                &self.shard.cloud,
                &ctx.views[v],
                &ctx.proj,
                &self.projected[v],
            )?;
            self.shard.stats.accumulate(
                &per_view[v].mean2d,
                &self.projected[v].radius,
                &self.projected[v].visible,
            );
            total.add_assign(&grads_v);
        }
        total.scale(1.0 / b as f64);
        if ctx.optimize {
            adam_step(
                &mut self.shard.cloud,
                &total,
                &mut self.shard.adam,
                &ctx.scaled,
            )?;
        }
        Ok(())
    }
}

/// Is the pixel within Chebyshev distance `reach` of any block owned by the
/// mask? Only the 3x3 tile neighborhood needs checking since the reach is
/// far below the block size.
fn pixel_near_region(
    mask: &BlockMask,
    view: &CameraView,
    x: i64,
    y: i64,
    reach: i64,
) -> bool {
    let (tx, ty) = (x / BLOCK as i64, y / BLOCK as i64);
    for dty in -1..=1i64 {
        for dtx in -1..=1i64 {
            let (ntx, nty) = (tx + dtx, ty + dty);
            if ntx < 0 || nty < 0 || ntx >= mask.tiles_x as i64 || nty >= mask.tiles_y as i64 {
                continue;
            }
            if !mask.is_owned(ntx as usize, nty as usize) {
                continue;
            }
            let x0 = ntx * BLOCK as i64;
            let y0 = nty * BLOCK as i64;
            let x1 = ((ntx + 1) * BLOCK as i64).min(view.width as i64) - 1;
            let y1 = ((nty + 1) * BLOCK as i64).min(view.height as i64) - 1;
            let dx = (x0 - x).max(x - x1).max(0);
            let dy = (y0 - y).max(y - y1).max(0);
            if dx.max(dy) <= reach {
                return true;
            }
        }
    }
    false
}
