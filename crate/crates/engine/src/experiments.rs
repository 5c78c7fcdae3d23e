//! Optimizer-analysis experiments: the gradient-variance sweep over batch
//! sizes, the scaling-rule trajectory comparison against a batch-size-1
//! baseline, and the load-balancing benchmark. All emit CSV rows and are
//! deterministic under a fixed seed.

use std::io::Write;
use std::path::Path;

use grendel_core::adam::{LrRule, MomentumRule};
use grendel_core::cloud::{GaussianCloud, ParamGroup};
use grendel_core::sh::SH_COEFFS;

use crate::engine::{Engine, EngineConfig, SceneData};
use crate::error::EngineError;
use crate::rng::{derive, tag};

/// One row of the gradient-variance sweep.
#[derive(Debug, Clone)]
pub struct VarianceRow {
    pub batch_size: usize,
    /// Mean over parameters of the across-trial second moment of the
    /// batch-mean gradient. Second moment about zero: the analysis models
    /// per-view gradients as zero-mean, and this keeps the perfectly
    /// correlated limit finite.
    pub variance: f64,
    pub inv_variance: f64,
}

/// Flattened values of one parameter group.
fn group_values(grads: &grendel_core::cloud::CloudGrads, group: ParamGroup) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..grads.len() {
        match group {
            ParamGroup::Position => out.extend_from_slice(&grads.positions[i]),
            ParamGroup::Scale => out.extend_from_slice(&grads.log_scales[i]),
            ParamGroup::Rotation => out.extend_from_slice(&grads.rotations[i]),
            ParamGroup::Opacity => out.push(grads.opacity_logits[i]),
            ParamGroup::ShDc => {
                for c in 0..3 {
                    out.push(grads.sh_coeffs[i][c * SH_COEFFS]);
                }
            }
            ParamGroup::ShRest => {
                for c in 0..3 {
                    for k in 1..SH_COEFFS {
                        out.push(grads.sh_coeffs[i][c * SH_COEFFS + k]);
                    }
                }
            }
        }
    }
    out
}

fn group_of_cloud(cloud: &GaussianCloud, group: ParamGroup) -> Vec<f64> {
    // Parameters and gradients share the array layout.
    let grads = grendel_core::cloud::CloudGrads {
        positions: cloud.positions.clone(),
        log_scales: cloud.log_scales.clone(),
        rotations: cloud.rotations.clone(),
        opacity_logits: cloud.opacity_logits.clone(),
        sh_coeffs: cloud.sh_coeffs.clone(),
    };
    group_values(&grads, group)
}

/// Mean gradient of `group` over a batch of views, computed by the full
/// pipeline without updating parameters.
fn batch_mean_gradient(
    cfg: &EngineConfig,
    scene: &SceneData,
    cloud: &GaussianCloud,
    views: &[usize],
    group: ParamGroup,
) -> Result<Vec<f64>, EngineError> {
    use grendel_core::cloud::CloudGrads;
    use grendel_core::loss::combined_loss;
    use grendel_core::project::{transform_backward, transform_gaussians, ProjectedGrads};
    use grendel_core::raster::{
        build_tile_lists, render_backward, render_forward, BlockMask, RenderAux,
    };

    let gids: Vec<u64> = (0..cloud.len() as u64).collect();
    let mut total = CloudGrads::zeros(cloud.len());
    for &vi in views {
        let cam = &scene.cameras[vi];
        let shard = transform_gaussians(cloud, cam, &cfg.proj)?;
        let mask = BlockMask::all(cam.width, cam.height);
        let zbuf = build_tile_lists(&shard, &gids, &mask);
        let mut img = grendel_core::image::ImageF::zeros(cam.width, cam.height);
        let mut aux = RenderAux::new(cam.width, cam.height);
        render_forward(
            &zbuf,
            &shard,
            &mask,
            cfg.background,
            &cfg.raster,
            &mut img,
            &mut aux,
        );
        let report = combined_loss(&img, &scene.targets[vi], None, &cfg.loss)?;
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
        total.add_assign(&transform_backward(&pgrads, cloud, cam, &cfg.proj, &shard)?);
    }
    total.scale(1.0 / views.len() as f64);
    Ok(group_values(&total, group))
}

/// Sweeps batch sizes, sampling `trials` random view batches per size
/// (uniform with replacement from the training split) and reporting the
/// per-parameter variance of the batch-mean gradient.
pub fn grad_variance_sweep(
    cfg: &EngineConfig,
    scene: &SceneData,
    cloud: &GaussianCloud,
    batch_sizes: &[usize],
    trials: usize,
    group: ParamGroup,
) -> Result<Vec<VarianceRow>, EngineError> {
    if trials < 2 {
        return Err(EngineError::Experiment("trials must be at least 2".into()));
    }
    let train = &scene.train;
    let mut rows = Vec::new();
    for &b in batch_sizes {
        if b > train.len() * 64 {
            return Err(EngineError::Experiment(format!(
                "batch size {b} far exceeds the {} available views",
                train.len()
            )));
        }
        let mut sum_sq: Option<Vec<f64>> = None;
        for trial in 0..trials {
            let views: Vec<usize> = (0..b)
                .map(|k| {
                    let r = derive(
                        cfg.seed,
                        tag::EXPERIMENT,
                        (b * 1_000_003 + trial) as u64,
                        k as u64,
                    );
                    train[(r % train.len() as u64) as usize]
                })
                .collect();
            let g = batch_mean_gradient(cfg, scene, cloud, &views, group)?;
            match &mut sum_sq {
                None => sum_sq = Some(g.iter().map(|v| v * v).collect()),
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v * v;
                    }
                }
            }
        }
        let sum_sq = sum_sq.unwrap();
        let variance =
            sum_sq.iter().sum::<f64>() / (trials as f64) / (sum_sq.len() as f64);
        rows.push(VarianceRow {
            batch_size: b,
            variance,
            inv_variance: 1.0 / variance,
        });
    }
    Ok(rows)
}

pub fn write_variance_csv(rows: &[VarianceRow], path: &Path) -> Result<(), EngineError> {
    let mut f = std::fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
    writeln!(f, "batch_size,variance,inv_variance").map_err(|e| EngineError::io(path, e))?;
    for r in rows {
        writeln!(f, "{},{},{}", r.batch_size, r.variance, r.inv_variance)
            .map_err(|e| EngineError::io(path, e))?;
    }
    Ok(())
}

/// Least-squares slope and R^2 of y against x.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

/// One row of the trajectory comparison.
#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub lr_rule: LrRule,
    pub momentum_rule: MomentumRule,
    pub batch_size: usize,
    pub images: u64,
    pub cosine_similarity: f64,
    pub norm_ratio: f64,
}

pub fn rule_name(rule: LrRule) -> &'static str {
    match rule {
        LrRule::Constant => "constant",
        LrRule::Sqrt => "sqrt",
        LrRule::Linear => "linear",
    }
}

pub fn momentum_name(rule: MomentumRule) -> &'static str {
    match rule {
        MomentumRule::Scaled => "scaled",
        MomentumRule::Unscaled => "unscaled",
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    dot / (na * nb)
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs one training configuration from `cloud` for `horizon` images and
/// returns cumulative updates of `group` at every `log_every` images.
fn run_trajectory(
    base_cfg: &EngineConfig,
    scene: &SceneData,
    cloud: &GaussianCloud,
    batch_size: usize,
    lr_rule: LrRule,
    momentum_rule: MomentumRule,
    horizon: u64,
    log_every: u64,
    group: ParamGroup,
) -> Result<Vec<(u64, Vec<f64>)>, EngineError> {
    let mut cfg = base_cfg.clone();
    cfg.batch_size = batch_size;
    cfg.hyper.lr_rule = lr_rule;
    cfg.hyper.momentum_rule = momentum_rule;
    cfg.densify = None;
    let start = group_of_cloud(cloud, group);
    let mut engine = Engine::new(cfg, scene.clone(), cloud.clone(), None, 0)?;
    let mut out = Vec::new();
    let mut next_log = log_every;
    while engine.images_seen < horizon {
        engine.step()?;
        if engine.images_seen >= next_log {
            let (_, current, _) = engine.gather();
            let now = group_of_cloud(&current, group);
            let delta: Vec<f64> = now.iter().zip(&start).map(|(a, b)| a - b).collect();
            out.push((engine.images_seen, delta));
            next_log += log_every;
        }
    }
    Ok(out)
}

/// Compares cumulative updates of each (lr rule, momentum rule, batch size)
/// variant against the batch-size-1 baseline on the same seeded view stream
/// and image horizon.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_compare(
    cfg: &EngineConfig,
    scene: &SceneData,
    cloud: &GaussianCloud,
    variants: &[(LrRule, MomentumRule)],
    batch_sizes: &[usize],
    horizon: u64,
    log_every: u64,
    group: ParamGroup,
) -> Result<Vec<TrajectoryRow>, EngineError> {
    let baseline = run_trajectory(
        cfg,
        scene,
        cloud,
        1,
        LrRule::Sqrt, // at b = 1 every rule is the identity
        MomentumRule::Scaled,
        horizon,
        log_every,
        group,
    )?;
    let mut rows = Vec::new();
    for &b in batch_sizes {
        for &(lr_rule, momentum_rule) in variants {
            let traj = run_trajectory(
                cfg, scene, cloud, b, lr_rule, momentum_rule, horizon, log_every, group,
            )?;
            for (images, delta) in &traj {
                let Some((_, base_delta)) = baseline.iter().find(|(im, _)| im == images) else {
                    continue;
                };
                rows.push(TrajectoryRow {
                    lr_rule,
                    momentum_rule,
                    batch_size: b,
                    images: *images,
                    cosine_similarity: cosine(delta, base_delta),
                    norm_ratio: norm(delta) / norm(base_delta).max(1e-300),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], path: &Path) -> Result<(), EngineError> {
    let mut f = std::fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
    writeln!(f, "lr_rule,momentum_rule,batch_size,images,cosine_similarity,norm_ratio")
        .map_err(|e| EngineError::io(path, e))?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            rule_name(r.lr_rule),
            momentum_name(r.momentum_rule),
            r.batch_size,
            r.images,
            r.cosine_similarity,
            r.norm_ratio
        )
        .map_err(|e| EngineError::io(path, e))?;
    }
    Ok(())
}

/// One row of the load-balancing benchmark.
#[derive(Debug, Clone)]
pub struct BalanceRow {
    pub mode: &'static str,
    pub iteration: u64,
    pub imbalance: f64,
    pub max_cost: f64,
    pub mean_cost: f64,
}

/// Measures the per-iteration imbalance ratio with and without iterative
/// rebalancing, in deterministic-cost mode with optimizer updates disabled
/// so the workload stays fixed. Runs at batch size 1: the point is how the
/// division points cut a single skewed image, not batch placement.
pub fn loadbalance_bench(
    cfg: &EngineConfig,
    scene: &SceneData,
    cloud: &GaussianCloud,
    iterations: u64,
) -> Result<Vec<BalanceRow>, EngineError> {
    let mut rows = Vec::new();
    for (mode, rebalance) in [("rebalance", true), ("static", false)] {
        let mut run_cfg = cfg.clone();
        run_cfg.batch_size = 1;
        run_cfg.deterministic_cost = true;
        run_cfg.rebalance_pixels = rebalance;
        run_cfg.optimize = false;
        run_cfg.densify = None;
        let mut engine = Engine::new(run_cfg, scene.clone(), cloud.clone(), None, 0)?;
        for _ in 0..iterations {
            let m = engine.step()?;
            let mean = m.worker_cost.iter().sum::<f64>() / m.worker_cost.len() as f64;
            rows.push(BalanceRow {
                mode,
                iteration: m.iteration,
                imbalance: m.imbalance,
                max_cost: m.worker_cost.iter().cloned().fold(0.0, f64::max),
                mean_cost: mean,
            });
        }
    }
    Ok(rows)
}

pub fn write_balance_csv(rows: &[BalanceRow], path: &Path) -> Result<(), EngineError> {
    let mut f = std::fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
    writeln!(f, "mode,iteration,imbalance_ratio,max_cost,mean_cost")
        .map_err(|e| EngineError::io(path, e))?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.mode, r.iteration, r.imbalance, r.max_cost, r.mean_cost
        )
        .map_err(|e| EngineError::io(path, e))?;
    }
    Ok(())
}
