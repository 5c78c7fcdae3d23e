//! Implementations behind the subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use grendel_core::cloud::{init_from_points, ParamGroup};
use grendel_engine::engine::{Engine, SceneData, StepMetrics};
use grendel_engine::error::EngineError;
use grendel_engine::experiments;
use grendel_engine::io::manifest::{load_manifest, to_scene_data};
use grendel_engine::io::state::{load_checkpoint, save_checkpoint, Checkpoint};
use grendel_engine::io::synth::{generate_synthetic_scene, materialize_dataset};
use grendel_engine::io::{ply, save_image};

use crate::config::{parse_lr_rule, Config};

/// User errors exit 1; internal errors exit 2.
pub enum CliError {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::User(e)
    }
}

/// Engine failures during setup point at user inputs; failures inside a
/// training run are internal.
fn engine_user(e: EngineError) -> CliError {
    CliError::User(anyhow!(e))
}

fn engine_internal(e: EngineError) -> CliError {
    CliError::Internal(anyhow!(e))
}

fn load_scene(cfg: &Config, manifest_path: &str) -> Result<SceneData, CliError> {
    let manifest = load_manifest(Path::new(manifest_path)).map_err(engine_user)?;
    let _ = cfg;
    to_scene_data(&manifest).map_err(engine_user)
}

pub fn cmd_synth(cfg: &Config, out: &str) -> Result<(), CliError> {
    let engine_cfg = cfg.engine_config()?;
    let spec = cfg.synth.to_spec(cfg.train.seed)?;
    let synth = generate_synthetic_scene(&spec, &engine_cfg.proj, &engine_cfg.raster)
        .map_err(engine_user)?;
    let manifest = materialize_dataset(&synth, Path::new(out)).map_err(engine_internal)?;
    println!(
        "wrote {} ({} gaussians, {} views)",
        manifest.display(),
        synth.gt_cloud.len(),
        synth.scene.cameras.len()
    );
    Ok(())
}

fn metrics_header(workers: usize) -> String {
    let costs: Vec<String> = (0..workers).map(|g| format!("cost_{g}")).collect();
    format!(
        "iteration,images,loss,l1,ssim,gaussians,exchange_volume,imbalance,{}",
        costs.join(",")
    )
}

fn metrics_row(m: &StepMetrics) -> String {
    let costs: Vec<String> = m.worker_cost.iter().map(|c| format!("{c}")).collect();
    format!(
        "{},{},{},{},{},{},{},{},{}",
        m.iteration,
        m.images_seen,
        m.loss,
        m.l1,
        m.ssim,
        m.gaussians,
        m.exchange_volume,
        m.imbalance,
        costs.join(",")
    )
}

pub fn cmd_train(cfg: &Config) -> Result<(), CliError> {
    let manifest_path = cfg
        .scene
        .manifest
        .as_deref()
        .ok_or_else(|| anyhow!("scene.manifest is required for training"))?;
    let manifest = load_manifest(Path::new(manifest_path)).map_err(engine_user)?;
    let scene = to_scene_data(&manifest).map_err(engine_user)?;
    let points_path = manifest
        .points_path
        .clone()
        .ok_or_else(|| anyhow!("manifest {manifest_path} has no points entry"))?;
    let points = ply::read_points(&points_path).map_err(engine_user)?;
    let cloud = init_from_points(&points)
        .map_err(|e| CliError::User(anyhow!(e)))?;

    let engine_cfg = cfg.engine_config()?;
    let out_dir = PathBuf::from(&cfg.train.out_dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics_file = std::fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics_file, "{}", metrics_header(engine_cfg.workers))
        .context("writing metrics header")?;

    let seed = engine_cfg.seed;
    let sh_degree = engine_cfg.proj.sh_degree;
    let mut engine =
        Engine::new(engine_cfg, scene, cloud, None, 0).map_err(engine_user)?;
    println!(
        "training {} gaussians on {} views ({} workers, batch {})",
        engine.total_gaussians(),
        engine.scene.train.len(),
        engine.cfg.workers,
        engine.cfg.batch_size
    );

    let started = std::time::Instant::now();
    let total_images = cfg.train.images;
    let mut next_checkpoint = if cfg.train.checkpoint_every_images > 0 {
        Some(cfg.train.checkpoint_every_images)
    } else {
        None
    };
    let mut log_at = 0u64;
    while engine.images_seen < total_images {
        let m = engine.step().map_err(engine_internal)?;
        writeln!(metrics_file, "{}", metrics_row(&m)).context("writing metrics row")?;
        if m.images_seen >= log_at {
            println!(
                "iter {:>6}  images {:>7}  loss {:.5}  gaussians {:>7}  imbalance {:.3}",
                m.iteration, m.images_seen, m.loss, m.gaussians, m.imbalance
            );
            log_at = m.images_seen + (total_images / 10).max(1);
        }
        if let Some(at) = next_checkpoint {
            if m.images_seen >= at {
                let path = out_dir.join(format!("checkpoint_{:07}.ply", m.images_seen));
                write_checkpoint(&engine, seed, sh_degree, &path)?;
                next_checkpoint = Some(at + cfg.train.checkpoint_every_images);
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "trained {} images in {:.1}s ({:.1} images/s)",
        engine.images_seen,
        elapsed,
        engine.images_seen as f64 / elapsed
    );

    let final_path = out_dir.join("checkpoint_final.ply");
    write_checkpoint(&engine, seed, sh_degree, &final_path)?;
    println!("checkpoint: {}", final_path.display());

    let eval_views = if engine.scene.test.is_empty() {
        engine.scene.train.clone()
    } else {
        engine.scene.test.clone()
    };
    let rows = engine.evaluate_views(&eval_views).map_err(engine_internal)?;
    let eval_path = out_dir.join("eval.csv");
    write_eval(&rows, Some(&eval_path))?;
    Ok(())
}

fn write_checkpoint(
    engine: &Engine,
    seed: u64,
    sh_degree: usize,
    path: &Path,
) -> Result<(), CliError> {
    let (_, cloud, adam) = engine.gather();
    let ckpt = Checkpoint {
        cloud,
        adam,
        iteration: engine.iteration,
        images_seen: engine.images_seen,
        seed,
    };
    save_checkpoint(&ckpt, sh_degree, path).map_err(engine_internal)
}

pub fn cmd_render(
    cfg: &Config,
    checkpoint: &str,
    manifest_path: &str,
    camera: u32,
    out: &str,
) -> Result<(), CliError> {
    let engine_cfg = cfg.engine_config()?;
    let cloud = ply::read_checkpoint_cloud(Path::new(checkpoint), engine_cfg.proj.sh_degree)
        .map_err(engine_user)?;
    let scene = load_scene(cfg, manifest_path)?;
    let index = scene
        .camera_by_id(camera)
        .ok_or_else(|| anyhow!("unknown camera id {camera} in {manifest_path}"))?;
    let gids: Vec<u64> = (0..cloud.len() as u64).collect();
    let img = grendel_engine::render::render_image(
        &cloud,
        &gids,
        &scene.cameras[index],
        engine_cfg.background,
        &engine_cfg.proj,
        &engine_cfg.raster,
    )
    .map_err(engine_internal)?;
    save_image(&img, Path::new(out)).map_err(engine_user)?;
    println!("rendered camera {camera} to {out}");
    Ok(())
}

fn write_eval(rows: &[grendel_engine::engine::EvalRow], path: Option<&Path>) -> Result<(), CliError> {
    let mut lines = vec!["camera_id,psnr,ssim".to_string()];
    let mut mean_psnr = 0.0;
    let mut mean_ssim = 0.0;
    for r in rows {
        lines.push(format!("{},{},{}", r.camera_id, r.psnr, r.ssim));
        mean_psnr += r.psnr;
        mean_ssim += r.ssim;
    }
    if !rows.is_empty() {
        mean_psnr /= rows.len() as f64;
        mean_ssim /= rows.len() as f64;
        lines.push(format!("mean,{mean_psnr},{mean_ssim}"));
    }
    let text = lines.join("\n") + "\n";
    for line in &lines {
        println!("{line}");
    }
    if let Some(p) = path {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn cmd_eval(
    cfg: &Config,
    checkpoint: &str,
    manifest_path: &str,
    out: Option<&str>,
    all_views: bool,
) -> Result<(), CliError> {
    let engine_cfg = cfg.engine_config()?;
    let cloud = ply::read_checkpoint_cloud(Path::new(checkpoint), engine_cfg.proj.sh_degree)
        .map_err(engine_user)?;
    let scene = load_scene(cfg, manifest_path)?;
    let views: Vec<usize> = if all_views || scene.test.is_empty() {
        (0..scene.cameras.len()).collect()
    } else {
        scene.test.clone()
    };
    let engine = Engine::new(engine_cfg, scene, cloud, None, 0).map_err(engine_user)?;
    let rows = engine.evaluate_views(&views).map_err(engine_internal)?;
    write_eval(&rows, out.map(Path::new))
}

fn parse_group(s: &str) -> Result<ParamGroup> {
    Ok(match s {
        "position" => ParamGroup::Position,
        "sh_dc" => ParamGroup::ShDc,
        "sh_rest" => ParamGroup::ShRest,
        "opacity" => ParamGroup::Opacity,
        "scale" => ParamGroup::Scale,
        "rotation" => ParamGroup::Rotation,
        other => bail!("unknown parameter group {other:?}"),
    })
}

fn parse_batch_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("bad batch size {t:?}"))
        })
        .collect()
}

pub fn cmd_grad_variance(
    cfg: &Config,
    checkpoint: &str,
    manifest_path: &str,
    out: &str,
    batch_sizes: &str,
    trials: usize,
    group: &str,
) -> Result<(), CliError> {
    let engine_cfg = cfg.engine_config()?;
    let cloud = ply::read_checkpoint_cloud(Path::new(checkpoint), engine_cfg.proj.sh_degree)
        .map_err(engine_user)?;
    let scene = load_scene(cfg, manifest_path)?;
    let rows = experiments::grad_variance_sweep(
        &engine_cfg,
        &scene,
        &cloud,
        &parse_batch_sizes(batch_sizes)?,
        trials,
        parse_group(group)?,
    )
    .map_err(engine_user)?;
    experiments::write_variance_csv(&rows, Path::new(out)).map_err(engine_internal)?;
    for r in &rows {
        println!(
            "b={:<3} variance={:.6e} 1/variance={:.6e}",
            r.batch_size, r.variance, r.inv_variance
        );
    }
    println!("wrote {out}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_trajectory(
    cfg: &Config,
    checkpoint: &str,
    manifest_path: &str,
    out: &str,
    batch_sizes: &str,
    horizon: u64,
    log_every: u64,
    group: &str,
    with_unscaled_momentum: bool,
) -> Result<(), CliError> {
    use grendel_core::adam::{LrRule, MomentumRule};
    let engine_cfg = cfg.engine_config()?;
    let ckpt = load_checkpoint(Path::new(checkpoint), engine_cfg.proj.sh_degree)
        .map_err(engine_user)?;
    let scene = load_scene(cfg, manifest_path)?;
    let mut variants = vec![
        (LrRule::Constant, MomentumRule::Scaled),
        (LrRule::Sqrt, MomentumRule::Scaled),
        (LrRule::Linear, MomentumRule::Scaled),
    ];
    if with_unscaled_momentum {
        variants.push((LrRule::Sqrt, MomentumRule::Unscaled));
    }
    let rows = experiments::trajectory_compare(
        &engine_cfg,
        &scene,
        &ckpt.cloud,
        &variants,
        &parse_batch_sizes(batch_sizes)?,
        horizon,
        log_every,
        parse_group(group)?,
    )
    .map_err(engine_internal)?;
    experiments::write_trajectory_csv(&rows, Path::new(out)).map_err(engine_internal)?;
    for r in rows.iter().filter(|r| r.images == horizon) {
        println!(
            "{:<9} momentum={:<8} b={:<3} cosine={:+.4} norm_ratio={:.4}",
            experiments::rule_name(r.lr_rule),
            experiments::momentum_name(r.momentum_rule),
            r.batch_size,
            r.cosine_similarity,
            r.norm_ratio
        );
    }
    println!("wrote {out}");
    Ok(())
}

pub fn cmd_loadbalance(cfg: &Config, out: &str, iterations: u64) -> Result<(), CliError> {
    let engine_cfg = cfg.engine_config()?;
    // The bench runs on the left-heavy synthetic scene regardless of any
    // configured manifest; the ground-truth cloud itself is the workload.
    // A wide, short image makes the uniform block split cut across the
    // horizontal skew.
    let mut synth_section = cfg.synth.clone();
    if synth_section.left_fraction <= 0.5 {
        synth_section.left_fraction = 0.9;
        synth_section.rig = "facing".into();
        synth_section.width = 256;
        synth_section.height = 32;
        synth_section.views = 2;
    }
    let spec = synth_section.to_spec(cfg.train.seed)?;
    let synth = generate_synthetic_scene(&spec, &engine_cfg.proj, &engine_cfg.raster)
        .map_err(engine_user)?;
    let rows = experiments::loadbalance_bench(
        &engine_cfg,
        &synth.scene,
        &synth.gt_cloud,
        iterations,
    )
    .map_err(engine_internal)?;
    experiments::write_balance_csv(&rows, Path::new(out)).map_err(engine_internal)?;
    for mode in ["rebalance", "static"] {
        let last = rows.iter().filter(|r| r.mode == mode).next_back();
        if let Some(r) = last {
            println!(
                "{mode:<10} steady-state imbalance {:.3} (max {:.0}, mean {:.0})",
                r.imbalance, r.max_cost, r.mean_cost
            );
        }
    }
    println!("wrote {out}");
    Ok(())
}

// parse_lr_rule is re-exported for use in tests and kept here to ensure the
// CLI strings stay in sync with the optimizer enums.
#[allow(unused_imports)]
use parse_lr_rule as _parse_lr_rule_keepalive;
