//! Training orchestration: drives the per-iteration phases across workers,
//! recomputes the pixel partition from timing history, and schedules
//! densification, opacity resets, gaussian redistribution, and evaluation.

use std::sync::Arc;

use grendel_core::adam::{scale_hyperparams, AdamState, HyperParams};
use grendel_core::camera::CameraView;
use grendel_core::cloud::GaussianCloud;
use grendel_core::densify::{
    apply_densify, densify_decisions, opacity_reset, DensifyConfig, DensifyStats,
};
use grendel_core::image::ImageF;
use grendel_core::loss::{psnr, ssim, LossConfig, SSIM_WINDOW};
use grendel_core::project::ProjectionConfig;
use grendel_core::raster::RasterConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::EngineError;
use crate::partition::{BlockLayout, PixelPartition};
use crate::render::render_image;
use crate::rng::{derive, tag, view_for_image};
use crate::shard::{rebalance_gaussians, shard_gaussians, Shard};
use crate::timing::CostHistory;
use crate::topology::WorkerTopology;
use crate::worker::{StepCtx, WorkerState};

/// Environment variable capping the number of OS threads the engine fans
/// worker phases across.
pub const THREADS_ENV: &str = "GRENDEL_MINI_THREADS";

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub workers: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Replace wall-clock block timings with composited-term counts, making
    /// partitions and imbalance metrics machine-independent.
    pub deterministic_cost: bool,
    /// Recompute division points from timing history each iteration; when
    /// off, the partition stays at the uniform block split.
    pub rebalance_pixels: bool,
    /// Redistribute gaussians every N densification events (0 disables).
    pub rebalance_every_events: u64,
    /// Cap on phase fan-out threads; 0 means one thread per worker, subject
    /// to the `GRENDEL_MINI_THREADS` environment cap.
    pub threads: usize,
    /// Skip optimizer updates (workload benchmarks).
    pub optimize: bool,
    pub background: [f64; 3],
    pub proj: ProjectionConfig,
    pub raster: RasterConfig,
    pub loss: LossConfig,
    pub hyper: HyperParams,
    pub densify: Option<DensifyConfig>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            workers: 4,
            batch_size: 4,
            seed: 0,
            deterministic_cost: false,
            rebalance_pixels: true,
            rebalance_every_events: 1,
            threads: 0,
            optimize: true,
            background: [0.0; 3],
            proj: ProjectionConfig::default(),
            raster: RasterConfig::default(),
            loss: LossConfig::default(),
            hyper: HyperParams::default(),
            densify: Some(DensifyConfig::default()),
        }
    }
}

/// Cameras, ground-truth images, and the train/test split.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub cameras: Vec<CameraView>,
    pub targets: Vec<Arc<ImageF>>,
    /// Camera indices (not ids) of the training and test views.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Radius of the camera-position bounding sphere.
    pub extent: f64,
}

impl SceneData {
    pub fn camera_by_id(&self, id: u32) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }
}

/// Per-iteration engine metrics.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub iteration: u64,
    pub images_seen: u64,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    /// Per-worker cost this iteration (terms in deterministic mode,
    /// nanoseconds otherwise).
    pub worker_cost: Vec<f64>,
    /// Max over mean per-worker cost.
    pub imbalance: f64,
    /// Forward all-to-all entries sent (including a worker's own blocks).
    pub exchange_volume: u64,
    /// Dense all-gather bound for the same iteration: G x N x batch.
    pub dense_bound: u64,
    pub false_deliveries: u64,
    pub gaussians: usize,
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub camera_id: u32,
    pub psnr: f64,
    pub ssim: f64,
}

pub struct Engine {
    pub cfg: EngineConfig,
    pub scene: SceneData,
    topology: WorkerTopology,
    workers: Vec<WorkerState>,
    history: CostHistory,
    hyper: HyperParams,
    threads: usize,
    pub images_seen: u64,
    pub iteration: u64,
    next_gid: u64,
    densify_events: u64,
    rebalance_events: u64,
    next_densify_at: Option<u64>,
    next_opacity_reset_at: Option<u64>,
}

impl Engine {
    /// Builds an engine over `cloud`, sharding it uniformly across workers.
    /// `start_images` seats the view stream and schedules (checkpoint
    /// resume); pass 0 for a fresh run.
    pub fn new(
        mut cfg: EngineConfig,
        scene: SceneData,
        cloud: GaussianCloud,
        adam: Option<AdamState>,
        start_images: u64,
    ) -> Result<Self, EngineError> {
        if cfg.workers == 0 || cfg.batch_size == 0 {
            return Err(EngineError::Config(
                "workers and batch_size must be at least 1".into(),
            ));
        }
        if scene.train.is_empty() {
            return Err(EngineError::Config("no training views".into()));
        }
        for cam in &scene.cameras {
            cam.validate()?;
        }
        let too_small = scene
            .cameras
            .iter()
            .any(|c| (c.width as usize) < SSIM_WINDOW || (c.height as usize) < SSIM_WINDOW);
        if too_small && cfg.loss.ssim_weight > 0.0 {
            log::warn!("images smaller than the SSIM window; training with L1 only");
            cfg.loss.ssim_weight = 0.0;
        }

        // The position learning rate is specified per unit of scene extent.
        let mut hyper = cfg.hyper.clone();
        hyper.lr_position *= scene.extent;
        hyper.lr_position_final *= scene.extent;
        hyper.batch_size = cfg.batch_size as u32;

        let n = cloud.len();
        let adam = match adam {
            Some(a) => {
                if a.len() != n {
                    return Err(EngineError::Config(format!(
                        "optimizer state rows {} do not match cloud {}",
                        a.len(),
                        n
                    )));
                }
                a
            }
            None => AdamState::zeros(n),
        };
        let assignments = shard_gaussians(n, cfg.workers, cfg.seed);
        let workers: Vec<WorkerState> = assignments
            .iter()
            .enumerate()
            .map(|(rank, idxs)| {
                let mut shard = Shard::default();
                for &i in idxs {
                    let i = i as usize;
                    shard.gids.push(i as u64);
                    shard.cloud.push_from(&cloud, i);
                    shard.adam.push_from(&adam, i);
                }
                shard.stats = DensifyStats::zeros(idxs.len());
                WorkerState::new(rank, shard)
            })
            .collect();

        let threads = resolve_threads(cfg.threads, cfg.workers);
        let densify = cfg.densify.clone();
        let next_densify_at = densify.as_ref().and_then(|d| {
            let first = d.start_images.max(1);
            (first <= d.stop_images).then_some(first)
        });
        let next_opacity_reset_at = densify.as_ref().and_then(|d| {
            (d.opacity_reset_interval > 0).then_some(d.opacity_reset_interval)
        });
        Ok(Engine {
            topology: WorkerTopology::new(cfg.workers),
            workers,
            history: CostHistory::new(),
            hyper,
            threads,
            images_seen: start_images,
            iteration: 0,
            next_gid: n as u64,
            densify_events: 0,
            rebalance_events: 0,
            next_densify_at: next_densify_at.map(|at| at.max(start_images + 1)),
            next_opacity_reset_at: next_opacity_reset_at.map(|at| at.max(start_images + 1)),
            cfg,
            scene,
        })
    }

    pub fn total_gaussians(&self) -> usize {
        self.workers.iter().map(|w| w.shard.len()).sum()
    }

    pub fn worker_shard_sizes(&self) -> Vec<usize> {
        self.workers.iter().map(|w| w.shard.len()).collect()
    }

    /// Camera indices of the batch starting at image position `at`.
    pub fn batch_views_at(&self, at: u64) -> Vec<usize> {
        (0..self.cfg.batch_size as u64)
            .map(|k| self.scene.train[view_for_image(self.cfg.seed, self.scene.train.len(), at + k)])
            .collect()
    }

    /// Runs one training iteration over the next batch of views.
    pub fn step(&mut self) -> Result<StepMetrics, EngineError> {
        let b = self.cfg.batch_size;
        let view_idxs = self.batch_views_at(self.images_seen);
        let views: Vec<CameraView> = view_idxs
            .iter()
            .map(|&i| self.scene.cameras[i].clone())
            .collect();
        let targets: Vec<Arc<ImageF>> = view_idxs
            .iter()
            .map(|&i| self.scene.targets[i].clone())
            .collect();
        let image_ids: Vec<u32> = view_idxs.iter().map(|&i| self.scene.cameras[i].id).collect();
        let layout = BlockLayout::new(
            &views
                .iter()
                .map(|v| (v.width, v.height))
                .collect::<Vec<_>>(),
        );
        let partition = if self.cfg.rebalance_pixels {
            let et = self.history.estimate(&layout, &image_ids);
            PixelPartition::new(layout, self.cfg.workers, &et)
        } else {
            PixelPartition::uniform(layout, self.cfg.workers)
        };
        let scaled = scale_hyperparams(&self.hyper, self.images_seen);
        let ctx = StepCtx {
            views: &views,
            targets: &targets,
            partition: &partition,
            transport: &self.topology.transport,
            proj: self.cfg.proj,
            raster: self.cfg.raster,
            loss: self.cfg.loss,
            background: self.cfg.background,
            scaled,
            optimize: self.cfg.optimize,
        };

        run_phase(&mut self.workers, self.threads, &ctx, WorkerState::phase_transform)?;
        self.topology.advance_generation();
        run_phase(&mut self.workers, self.threads, &ctx, WorkerState::phase_render)?;
        self.topology.advance_generation();
        run_phase(&mut self.workers, self.threads, &ctx, WorkerState::phase_loss)?;
        self.topology.advance_generation();
        run_phase(&mut self.workers, self.threads, &ctx, WorkerState::phase_render_backward)?;
        self.topology.advance_generation();
        run_phase(&mut self.workers, self.threads, &ctx, WorkerState::phase_apply)?;

        // Fold this pass's per-block costs into the history.
        let mut durations = vec![0.0f64; partition.layout.total_blocks];
        let mut worker_cost = vec![0.0f64; self.cfg.workers];
        for w in &self.workers {
            for s in &w.cost_samples {
                let cost = if self.cfg.deterministic_cost {
                    s.terms as f64
                } else {
                    s.nanos as f64
                };
                durations[partition.layout.global_block(s.view, s.tile)] += cost;
                worker_cost[w.rank] += cost;
            }
        }
        self.history.record(&partition, &image_ids, &durations);

        let mut l1 = 0.0;
        let mut ssim_total = 0.0;
        for v in 0..b {
            for w in &self.workers {
                l1 += w.loss_parts[v].0;
                ssim_total += w.loss_parts[v].1;
            }
        }
        l1 /= b as f64;
        ssim_total /= b as f64;
        let w_ssim = self.cfg.loss.ssim_weight;
        let loss = (1.0 - w_ssim) * l1 + w_ssim * (1.0 - ssim_total);

        let mean_cost = worker_cost.iter().sum::<f64>() / self.cfg.workers as f64;
        let max_cost = worker_cost.iter().cloned().fold(0.0, f64::max);
        let imbalance = if mean_cost > 0.0 { max_cost / mean_cost } else { 1.0 };
        let exchange_volume: u64 = self.workers.iter().map(|w| w.sent_entries).sum();
        let false_deliveries: u64 = self.workers.iter().map(|w| w.false_deliveries).sum();
        let gaussians = self.total_gaussians();

        self.images_seen += b as u64;
        self.iteration += 1;
        let metrics = StepMetrics {
            iteration: self.iteration,
            images_seen: self.images_seen,
            loss,
            l1,
            ssim: ssim_total,
            worker_cost,
            imbalance,
            exchange_volume,
            dense_bound: (self.cfg.workers * gaussians * b) as u64,
            false_deliveries,
            gaussians,
        };
        self.run_maintenance()?;
        Ok(metrics)
    }

    /// Trains until `images` more images have been consumed.
    pub fn train_images(
        &mut self,
        images: u64,
        mut on_iter: impl FnMut(&StepMetrics),
    ) -> Result<(), EngineError> {
        let stop = self.images_seen + images;
        while self.images_seen < stop {
            let metrics = self.step()?;
            on_iter(&metrics);
        }
        Ok(())
    }

    fn run_maintenance(&mut self) -> Result<(), EngineError> {
        let Some(densify_cfg) = self.cfg.densify.clone() else {
            return Ok(());
        };
        while let Some(at) = self.next_densify_at {
            if self.images_seen < at {
                break;
            }
            self.densify_event(&densify_cfg);
            let next = at + densify_cfg.interval_images.max(1);
            self.next_densify_at = (next <= densify_cfg.stop_images).then_some(next);
        }
        while let Some(at) = self.next_opacity_reset_at {
            if self.images_seen < at {
                break;
            }
            for w in &mut self.workers {
                opacity_reset(&mut w.shard.cloud, &mut w.shard.adam);
            }
            self.next_opacity_reset_at = Some(at + densify_cfg.opacity_reset_interval);
        }
        Ok(())
    }

    fn densify_event(&mut self, cfg: &DensifyConfig) {
        let extent = self.scene.extent;
        let decisions: Vec<_> = self
            .workers
            .iter()
            .map(|w| densify_decisions(&w.shard.cloud, &w.shard.stats, cfg, extent))
            .collect();
        let planned: usize = decisions.iter().map(|d| d.planned_additions()).sum();
        let current = self.total_gaussians();
        if current + planned > cfg.max_gaussians {
            log::warn!(
                "densification skipped: {current} gaussians + {planned} planned exceeds budget {}",
                cfg.max_gaussians
            );
            for w in &mut self.workers {
                let n = w.shard.len();
                w.shard.stats.reset(n);
            }
            self.densify_events += 1;
            return;
        }

        // Apply locally; sampling streams are keyed by stable global ids so
        // the outcome does not depend on worker count.
        let seed = self.cfg.seed;
        let event = self.densify_events;
        let mut all_children: Vec<(u64, u8, usize, usize)> = Vec::new();
        for (rank, (w, decision)) in self.workers.iter_mut().zip(&decisions).enumerate() {
            let gids = w.shard.gids.clone();
            let appended = apply_densify(
                &mut w.shard.cloud,
                &mut w.shard.adam,
                &mut w.shard.stats,
                decision,
                cfg,
                |local| ChaCha8Rng::seed_from_u64(derive(seed, tag::DENSIFY, event, gids[local])),
            );
            // Survivors keep their ids; children get fresh ids below.
            let kept: Vec<u64> = gids
                .iter()
                .enumerate()
                .filter(|(i, _)| !decision.prune[*i] && !decision.split[*i])
                .map(|(_, &g)| g)
                .collect();
            w.shard.gids = kept;
            for (k, child) in appended.iter().enumerate() {
                all_children.push((gids[child.parent_index], child.child_ordinal, rank, k));
            }
        }
        // Fresh ids in (parent id, ordinal) order: invariant to sharding.
        all_children.sort();
        let mut per_worker_children: Vec<Vec<(usize, u64)>> =
            vec![Vec::new(); self.cfg.workers];
        for (parent_gid, ordinal, rank, k) in all_children {
            let gid = self.next_gid;
            self.next_gid += 1;
            per_worker_children[rank].push((k, gid));
            let _ = (parent_gid, ordinal);
        }
        for (rank, mut children) in per_worker_children.into_iter().enumerate() {
            children.sort();
            let w = &mut self.workers[rank];
            let base = w.shard.gids.len();
            w.shard.gids.resize(base + children.len(), 0);
            for (k, gid) in children {
                w.shard.gids[base + k] = gid;
            }
            debug_assert_eq!(w.shard.gids.len(), w.shard.cloud.len());
        }
        self.densify_events += 1;

        let every = self.cfg.rebalance_every_events;
        if every > 0 && self.densify_events % every == 0 {
            self.rebalance_event();
        }
    }

    fn rebalance_event(&mut self) {
        let (gids, cloud, adam) = self.gather();
        let assignments =
            rebalance_gaussians(&gids, self.cfg.workers, self.cfg.seed, self.rebalance_events);
        let index_of: std::collections::HashMap<u64, usize> =
            gids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        for (rank, assigned) in assignments.into_iter().enumerate() {
            let mut shard = Shard::default();
            for gid in assigned {
                let row = index_of[&gid];
                shard.gids.push(gid);
                shard.cloud.push_from(&cloud, row);
                shard.adam.push_from(&adam, row);
            }
            shard.stats = DensifyStats::zeros(shard.gids.len());
            self.workers[rank].shard = shard;
        }
        self.rebalance_events += 1;
    }

    /// Assembles the global cloud and optimizer state, sorted by global id.
    pub fn gather(&self) -> (Vec<u64>, GaussianCloud, AdamState) {
        let mut rows: Vec<(u64, usize, usize)> = Vec::with_capacity(self.total_gaussians());
        for (rank, w) in self.workers.iter().enumerate() {
            for (local, &gid) in w.shard.gids.iter().enumerate() {
                rows.push((gid, rank, local));
            }
        }
        rows.sort();
        let mut cloud = GaussianCloud::default();
        let mut adam = AdamState::zeros(0);
        let mut gids = Vec::with_capacity(rows.len());
        // Step counters advance in lockstep on every worker; take rank 0's.
        adam.steps = self.workers[0].shard.adam.steps;
        for (gid, rank, local) in rows {
            gids.push(gid);
            let shard = &self.workers[rank].shard;
            cloud.push_from(&shard.cloud, local);
            adam.push_from(&shard.adam, local);
        }
        (gids, cloud, adam)
    }

    /// Renders one camera with the current global model.
    pub fn render_view(&self, camera_index: usize) -> Result<ImageF, EngineError> {
        let (gids, cloud, _) = self.gather();
        render_image(
            &cloud,
            &gids,
            &self.scene.cameras[camera_index],
            self.cfg.background,
            &self.cfg.proj,
            &self.cfg.raster,
        )
    }

    /// PSNR/SSIM of every test view against its ground truth.
    pub fn evaluate_test(&self) -> Result<Vec<EvalRow>, EngineError> {
        self.evaluate_views(&self.scene.test.clone())
    }

    pub fn evaluate_views(&self, camera_indices: &[usize]) -> Result<Vec<EvalRow>, EngineError> {
        let (gids, cloud, _) = self.gather();
        let mut rows = Vec::with_capacity(camera_indices.len());
        for &i in camera_indices {
            let cam = &self.scene.cameras[i];
            let img = render_image(
                &cloud,
                &gids,
                cam,
                self.cfg.background,
                &self.cfg.proj,
                &self.cfg.raster,
            )?;
            let target = &self.scene.targets[i];
            let (s, _) = ssim(&img, target, None, &self.cfg.loss)?;
            rows.push(EvalRow {
                camera_id: cam.id,
                psnr: psnr(&img, target),
                ssim: s,
            });
        }
        Ok(rows)
    }
}

fn resolve_threads(requested: usize, workers: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(workers);
    let base = if requested > 0 { requested } else { workers };
    base.min(cap).min(workers).max(1)
}

fn run_phase<F>(
    workers: &mut [WorkerState],
    threads: usize,
    ctx: &StepCtx,
    f: F,
) -> Result<(), EngineError>
where
    F: Fn(&mut WorkerState, &StepCtx) -> Result<(), EngineError> + Sync,
{
    if threads <= 1 || workers.len() <= 1 {
        for w in workers.iter_mut() {
            f(w, ctx)?;
        }
        return Ok(());
    }
    let chunk = workers.len().div_ceil(threads);
    let mut result = Ok(());
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = workers
            .chunks_mut(chunk)
            .map(|ws| {
                scope.spawn(move || -> Result<(), EngineError> {
                    for w in ws {
                        f(w, ctx)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            if let Err(e) = h.join().expect("worker thread panicked") {
                result = Err(e);
            }
        }
    });
    result
}
