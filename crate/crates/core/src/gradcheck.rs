//! Central-finite-difference harness for the differentiable pipeline.
//!
//! Drives the scalar loss (projection -> rasterization -> L1 + SSIM) through
//! random parameter probes and compares the analytic gradient chain against
//! central differences. Probes that straddle a compositing discontinuity
//! (contributor-set change, visibility flip, color-clamp kink, L1 sign flip)
//! are detected by a contributor snapshot plus a half-step consistency check
//! and skipped, mirroring the piecewise definition of the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraView;
use crate::cloud::{GaussianCloud, SH_PER_GAUSSIAN};
use crate::image::ImageF;
use crate::loss::{combined_loss, LossConfig};
use crate::project::{transform_backward, transform_gaussians, ProjectedGrads, ProjectionConfig};
use crate::raster::{build_tile_lists, render_backward, render_forward, BlockMask, RasterConfig, RenderAux};
use crate::cloud::CloudGrads;

/// Scalars per gaussian: position 3, log scale 3, rotation 4, opacity 1, SH 48.
pub const SLOTS_PER_GAUSSIAN: usize = 11 + SH_PER_GAUSSIAN;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub scenes: usize,
    pub probes_per_scene: usize,
    pub gaussians: usize,
    pub width: u32,
    pub height: u32,
    pub rel_tol: f64,
    /// Differences below this are treated as finite-difference noise.
    pub abs_floor: f64,
    pub step: f64,
    pub with_ssim: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 7,
            scenes: 5,
            probes_per_scene: 100,
            gaussians: 20,
            width: 32,
            height: 32,
            rel_tol: 1e-5,
            abs_floor: 1e-8,
            step: 1e-5,
            with_ssim: true,
        }
    }
}

#[derive(Debug, Default)]
pub struct GradCheckOutcome {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

pub fn get_param(cloud: &GaussianCloud, i: usize, slot: usize) -> f64 {
    match slot {
        0..=2 => cloud.positions[i][slot],
        3..=5 => cloud.log_scales[i][slot - 3],
        6..=9 => cloud.rotations[i][slot - 6],
        10 => cloud.opacity_logits[i],
        _ => cloud.sh_coeffs[i][slot - 11],
    }
}

pub fn set_param(cloud: &mut GaussianCloud, i: usize, slot: usize, v: f64) {
    match slot {
        0..=2 => cloud.positions[i][slot] = v,
        3..=5 => cloud.log_scales[i][slot - 3] = v,
        6..=9 => cloud.rotations[i][slot - 6] = v,
        10 => cloud.opacity_logits[i] = v,
        _ => cloud.sh_coeffs[i][slot - 11] = v,
    }
}

pub fn get_grad(grads: &CloudGrads, i: usize, slot: usize) -> f64 {
    match slot {
        0..=2 => grads.positions[i][slot],
        3..=5 => grads.log_scales[i][slot - 3],
        6..=9 => grads.rotations[i][slot - 6],
        10 => grads.opacity_logits[i],
        _ => grads.sh_coeffs[i][slot - 11],
    }
}

/// A random scene in front of a 32x32-ish camera, plus a random target image.
pub fn random_scene(
    seed: u64,
    gaussians: usize,
    width: u32,
    height: u32,
) -> (GaussianCloud, CameraView, ImageF) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::default();
    for _ in 0..gaussians {
        cloud.positions.push([
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(2.5..7.0),
        ]);
        let s = rng.random_range(-3.2..-1.2);
        cloud.log_scales.push([
            s + rng.random_range(-0.3..0.3),
            s + rng.random_range(-0.3..0.3),
            s + rng.random_range(-0.3..0.3),
        ]);
        let q: [f64; 4] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ];
        cloud.rotations.push(q);
        cloud.opacity_logits.push(rng.random_range(-1.5..1.5));
        let mut sh = [0.0; SH_PER_GAUSSIAN];
        for (k, v) in sh.iter_mut().enumerate() {
            *v = if k % 16 == 0 {
                rng.random_range(0.0..1.2)
            } else {
                rng.random_range(-0.2..0.2)
            };
        }
        cloud.sh_coeffs.push(sh);
    }
    let view = CameraView::facing_z(0, width, height, width as f64 * 0.9, width as f64 * 0.9);
    let mut target = ImageF::zeros(width, height);
    for p in &mut target.data {
        for c in 0..3 {
            p[c] = rng.random_range(0.0..1.0);
        }
    }
    (cloud, view, target)
}

/// Per-pixel compositing fingerprint used to detect probe discontinuities.
#[derive(PartialEq)]
struct Snapshot {
    visible: Vec<bool>,
    radius: Vec<f64>,
    n_contrib: Vec<u32>,
    last_pos: Vec<u32>,
}

struct PipelineCfg {
    proj: ProjectionConfig,
    raster: RasterConfig,
    loss: LossConfig,
    background: [f64; 3],
}

impl PipelineCfg {
    fn new(with_ssim: bool) -> Self {
        PipelineCfg {
            proj: ProjectionConfig::default(),
            raster: RasterConfig::default(),
            loss: LossConfig {
                ssim_weight: if with_ssim { 0.2 } else { 0.0 },
                ..LossConfig::default()
            },
            background: [0.05, 0.05, 0.05],
        }
    }
}

fn forward_loss(
    cloud: &GaussianCloud,
    view: &CameraView,
    target: &ImageF,
    cfg: &PipelineCfg,
) -> (f64, Snapshot) {
    let shard = transform_gaussians(cloud, view, &cfg.proj).expect("finite scene");
    let gids: Vec<u64> = (0..cloud.len() as u64).collect();
    let mask = BlockMask::all(view.width, view.height);
    let zbuf = build_tile_lists(&shard, &gids, &mask);
    let mut img = ImageF::zeros(view.width, view.height);
    let mut aux = RenderAux::new(view.width, view.height);
    render_forward(&zbuf, &shard, &mask, cfg.background, &cfg.raster, &mut img, &mut aux);
    let report = combined_loss(&img, target, None, &cfg.loss).expect("matched dims");
    (
        report.combined,
        Snapshot {
            visible: shard.visible.clone(),
            radius: shard.radius.clone(),
            n_contrib: aux.n_contrib.clone(),
            last_pos: aux.last_pos.clone(),
        },
    )
}

fn analytic_grads(
    cloud: &GaussianCloud,
    view: &CameraView,
    target: &ImageF,
    cfg: &PipelineCfg,
) -> CloudGrads {
    let shard = transform_gaussians(cloud, view, &cfg.proj).expect("finite scene");
    let gids: Vec<u64> = (0..cloud.len() as u64).collect();
    let mask = BlockMask::all(view.width, view.height);
    let zbuf = build_tile_lists(&shard, &gids, &mask);
    let mut img = ImageF::zeros(view.width, view.height);
    let mut aux = RenderAux::new(view.width, view.height);
    render_forward(&zbuf, &shard, &mask, cfg.background, &cfg.raster, &mut img, &mut aux);
    let report = combined_loss(&img, target, None, &cfg.loss).expect("matched dims");
    let mut pgrads = ProjectedGrads::zeros(cloud.len());
    render_backward(
        &report.grad,
        &zbuf,
        &shard,
        &mask,
        cfg.background,
        &cfg.raster,
        &aux,
        &mut pgrads,
    );
    transform_backward(&pgrads, cloud, view, &cfg.proj, &shard).expect("matched shard")
}

/// Checks the full pipeline loss gradient on `cfg.scenes` random scenes.
pub fn check_full_pipeline(cfg: &GradCheckConfig) -> GradCheckOutcome {
    let mut outcome = GradCheckOutcome::default();
    let pipeline = PipelineCfg::new(cfg.with_ssim);
    for scene in 0..cfg.scenes {
        let (cloud, view, target) = random_scene(
            cfg.seed.wrapping_add(scene as u64),
            cfg.gaussians,
            cfg.width,
            cfg.height,
        );
        let grads = analytic_grads(&cloud, &view, &target, &pipeline);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9 ^ scene as u64);
        let mut probed = 0;
        while probed < cfg.probes_per_scene {
            probed += 1;
            let i = rng.random_range(0..cloud.len());
            let slot = rng.random_range(0..SLOTS_PER_GAUSSIAN);
            let analytic = get_grad(&grads, i, slot);
            let probe = |delta: f64| {
                let mut c = cloud.clone();
                set_param(&mut c, i, slot, get_param(&cloud, i, slot) + delta);
                forward_loss(&c, &view, &target, &pipeline)
            };
            let h = cfg.step;
            let (lp, sp) = probe(h);
            let (lm, sm) = probe(-h);
            let (lp2, sp2) = probe(0.5 * h);
            let (lm2, sm2) = probe(-0.5 * h);
            if sp != sm || sp2 != sm2 || sp != sp2 {
                outcome.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let fd2 = (lp2 - lm2) / h;
            // Half-step consistency: a kink inside the probe interval shows
            // up as disagreement between the two estimates.
            if (fd - fd2).abs() > 0.1 * fd.abs().max(fd2.abs()) + cfg.abs_floor {
                outcome.skipped += 1;
                continue;
            }
            let diff = (analytic - fd).abs();
            let rel = diff / analytic.abs().max(fd.abs()).max(1e-300);
            if diff > cfg.abs_floor && rel > cfg.rel_tol {
                outcome.failures.push(format!(
                    "scene {scene} gaussian {i} slot {slot}: analytic {analytic:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
                ));
            }
            if diff > cfg.abs_floor {
                outcome.max_rel_err = outcome.max_rel_err.max(rel);
            }
            outcome.checked += 1;
        }
    }
    outcome
}

/// Checks the projection backward in isolation: the scalar is a fixed random
/// linear functional of the visible projected attributes.
pub fn check_projection_only(cfg: &GradCheckConfig) -> GradCheckOutcome {
    let mut outcome = GradCheckOutcome::default();
    let proj = ProjectionConfig::default();
    for scene in 0..cfg.scenes {
        let (cloud, view, _) = random_scene(
            cfg.seed.wrapping_add(scene as u64),
            cfg.gaussians,
            cfg.width,
            cfg.height,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51ed_2701 ^ scene as u64);
        let n = cloud.len();
        let mut weights = ProjectedGrads::zeros(n);
        for i in 0..n {
            weights.mean2d[i] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            for a in 0..3 {
                weights.conic[i][a] = rng.random_range(-1.0..1.0);
                weights.rgb[i][a] = rng.random_range(-1.0..1.0);
            }
            weights.opacity[i] = rng.random_range(-1.0..1.0);
        }
        let scalar = |c: &GaussianCloud| -> (f64, Vec<bool>) {
            let shard = transform_gaussians(c, &view, &proj).expect("finite");
            let mut acc = 0.0;
            for i in 0..n {
                if !shard.visible[i] {
                    continue;
                }
                acc += weights.mean2d[i][0] * shard.mean2d[i][0]
                    + weights.mean2d[i][1] * shard.mean2d[i][1]
                    + weights.opacity[i] * shard.opacity[i];
                for a in 0..3 {
                    acc += weights.conic[i][a] * shard.conic[i][a]
                        + weights.rgb[i][a] * shard.rgb[i][a];
                }
            }
            (acc, shard.visible)
        };
        let shard = transform_gaussians(&cloud, &view, &proj).expect("finite");
        let grads = transform_backward(&weights, &cloud, &view, &proj, &shard).expect("shapes");

        let mut probed = 0;
        while probed < cfg.probes_per_scene {
            probed += 1;
            let i = rng.random_range(0..n);
            let slot = rng.random_range(0..SLOTS_PER_GAUSSIAN);
            let analytic = get_grad(&grads, i, slot);
            let h = cfg.step;
            let eval = |delta: f64| {
                let mut c = cloud.clone();
                set_param(&mut c, i, slot, get_param(&cloud, i, slot) + delta);
                scalar(&c)
            };
            let (lp, vp) = eval(h);
            let (lm, vm) = eval(-h);
            let (lp2, vp2) = eval(0.5 * h);
            let (lm2, _) = eval(-0.5 * h);
            if vp != vm || vp != vp2 {
                outcome.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let fd2 = (lp2 - lm2) / h;
            if (fd - fd2).abs() > 0.1 * fd.abs().max(fd2.abs()) + cfg.abs_floor {
                outcome.skipped += 1;
                continue;
            }
            let diff = (analytic - fd).abs();
            let rel = diff / analytic.abs().max(fd.abs()).max(1e-300);
            if diff > cfg.abs_floor && rel > cfg.rel_tol {
                outcome.failures.push(format!(
                    "scene {scene} gaussian {i} slot {slot}: analytic {analytic:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
                ));
            }
            if diff > cfg.abs_floor {
                outcome.max_rel_err = outcome.max_rel_err.max(rel);
            }
            outcome.checked += 1;
        }
    }
    outcome
}
