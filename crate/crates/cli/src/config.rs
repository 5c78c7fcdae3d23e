//! TOML configuration with CLI `--set section.key=value` overrides. Every
//! default in `Config::default()` matches the engine's built-in defaults;
//! `grendel-mini config --dump-defaults` prints the full table.

use anyhow::{anyhow, bail, Context, Result};
use grendel_core::adam::{HyperParams, LrRule, MomentumRule};
use grendel_core::densify::DensifyConfig;
use grendel_core::loss::LossConfig;
use grendel_core::project::ProjectionConfig;
use grendel_core::raster::RasterConfig;
use grendel_engine::engine::EngineConfig;
use grendel_engine::io::synth::{Rig, SyntheticSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneSection,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub optimizer: OptimizerSection,
    pub densify: DensifySection,
    pub loss: LossSection,
    pub render: RenderSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            scene: SceneSection::default(),
            synth: SynthSection::default(),
            train: TrainSection::default(),
            optimizer: OptimizerSection::default(),
            densify: DensifySection::default(),
            loss: LossSection::default(),
            render: RenderSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    /// Path to the dataset manifest (JSON).
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub extent: f64,
    pub rig: String,
    pub left_fraction: f64,
    pub opacity_min: f64,
    pub opacity_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub init_points_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        SynthSection {
            count: s.count,
            views: s.views,
            width: s.width,
            height: s.height,
            extent: s.extent,
            rig: "orbit".into(),
            left_fraction: s.left_fraction,
            opacity_min: s.opacity_range.0,
            opacity_max: s.opacity_range.1,
            scale_min: s.scale_range.0,
            scale_max: s.scale_range.1,
            init_points_fraction: s.init_points_fraction,
        }
    }
}

impl SynthSection {
    pub fn to_spec(&self, seed: u64) -> Result<SyntheticSpec> {
        let rig = match self.rig.as_str() {
            "orbit" => Rig::Orbit,
            "facing" => Rig::Facing,
            other => bail!("unknown rig {other:?} (expected orbit or facing)"),
        };
        Ok(SyntheticSpec {
            count: self.count,
            views: self.views,
            width: self.width,
            height: self.height,
            seed,
            extent: self.extent,
            rig,
            left_fraction: self.left_fraction,
            opacity_range: (self.opacity_min, self.opacity_max),
            scale_range: (self.scale_min, self.scale_max),
            init_points_fraction: self.init_points_fraction,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub images: u64,
    pub workers: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic_cost: bool,
    pub rebalance_pixels: bool,
    pub rebalance_every_events: u64,
    pub threads: usize,
    pub checkpoint_every_images: u64,
    pub out_dir: String,
    pub max_gaussians: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = DensifyConfig::default();
        TrainSection {
            images: 5000,
            workers: 4,
            batch_size: 4,
            seed: 0,
            deterministic_cost: false,
            rebalance_pixels: true,
            rebalance_every_events: 1,
            threads: 0,
            checkpoint_every_images: 0,
            out_dir: "runs/default".into(),
            max_gaussians: d.max_gaussians,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_position_max_images: u64,
    pub lr_sh_dc: f64,
    pub lr_sh_rest: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_rule: String,
    pub momentum_rule: String,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let h = HyperParams::default();
        OptimizerSection {
            lr_position: h.lr_position,
            lr_position_final: h.lr_position_final,
            lr_position_max_images: h.lr_position_max_images,
            lr_sh_dc: h.lr_sh_dc,
            lr_sh_rest: h.lr_sh_rest,
            lr_opacity: h.lr_opacity,
            lr_scale: h.lr_scale,
            lr_rotation: h.lr_rotation,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            lr_rule: "sqrt".into(),
            momentum_rule: "scaled".into(),
        }
    }
}

pub fn parse_lr_rule(s: &str) -> Result<LrRule> {
    match s {
        "constant" => Ok(LrRule::Constant),
        "sqrt" => Ok(LrRule::Sqrt),
        "linear" => Ok(LrRule::Linear),
        other => bail!("unknown lr rule {other:?} (constant|sqrt|linear)"),
    }
}

pub fn parse_momentum_rule(s: &str) -> Result<MomentumRule> {
    match s {
        "scaled" => Ok(MomentumRule::Scaled),
        "unscaled" => Ok(MomentumRule::Unscaled),
        other => bail!("unknown momentum rule {other:?} (scaled|unscaled)"),
    }
}

impl OptimizerSection {
    pub fn to_hyper(&self, batch_size: u32) -> Result<HyperParams> {
        Ok(HyperParams {
            lr_position: self.lr_position,
            lr_position_final: self.lr_position_final,
            lr_position_max_images: self.lr_position_max_images,
            lr_sh_dc: self.lr_sh_dc,
            lr_sh_rest: self.lr_sh_rest,
            lr_opacity: self.lr_opacity,
            lr_scale: self.lr_scale,
            lr_rotation: self.lr_rotation,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            batch_size,
            lr_rule: parse_lr_rule(&self.lr_rule)?,
            momentum_rule: parse_momentum_rule(&self.momentum_rule)?,
            bias_correction: true,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifySection {
    pub enabled: bool,
    pub grad_threshold: f64,
    pub scale_split_threshold: f64,
    pub split_factor: f64,
    pub prune_opacity: f64,
    pub prune_screen_radius: f64,
    pub start_images: u64,
    pub stop_images: u64,
    pub interval_images: u64,
    pub opacity_reset_interval: u64,
}

impl Default for DensifySection {
    fn default() -> Self {
        let d = DensifyConfig::default();
        DensifySection {
            enabled: true,
            grad_threshold: d.grad_threshold,
            scale_split_threshold: d.scale_split_threshold,
            split_factor: d.split_factor,
            prune_opacity: d.prune_opacity,
            prune_screen_radius: d.prune_screen_radius,
            start_images: d.start_images,
            stop_images: d.stop_images,
            interval_images: d.interval_images,
            opacity_reset_interval: d.opacity_reset_interval,
        }
    }
}

impl DensifySection {
    pub fn to_config(&self, max_gaussians: usize) -> Option<DensifyConfig> {
        self.enabled.then(|| DensifyConfig {
            grad_threshold: self.grad_threshold,
            scale_split_threshold: self.scale_split_threshold,
            split_factor: self.split_factor,
            prune_opacity: self.prune_opacity,
            prune_screen_radius: self.prune_screen_radius,
            max_gaussians,
            start_images: self.start_images,
            stop_images: self.stop_images,
            interval_images: self.interval_images,
            opacity_reset_interval: self.opacity_reset_interval,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub ssim_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            ssim_weight: LossConfig::default().ssim_weight,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub sh_degree: usize,
    pub near_clip: f64,
    pub dilation: f64,
    pub alpha_min: f64,
    pub alpha_cap: f64,
    pub transmittance_min: f64,
    pub background: [f64; 3],
}

impl Default for RenderSection {
    fn default() -> Self {
        let p = ProjectionConfig::default();
        let r = RasterConfig::default();
        RenderSection {
            sh_degree: p.sh_degree,
            near_clip: p.near_clip,
            dilation: p.dilation,
            alpha_min: r.alpha_min,
            alpha_cap: r.alpha_cap,
            transmittance_min: r.transmittance_min,
            background: [0.0; 3],
        }
    }
}

impl Config {
    /// Assembles the engine configuration from the parsed sections.
    pub fn engine_config(&self) -> Result<EngineConfig> {
        Ok(EngineConfig {
            workers: self.train.workers,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            deterministic_cost: self.train.deterministic_cost,
            rebalance_pixels: self.train.rebalance_pixels,
            rebalance_every_events: self.train.rebalance_every_events,
            threads: self.train.threads,
            optimize: true,
            background: self.render.background,
            proj: ProjectionConfig {
                near_clip: self.render.near_clip,
                dilation: self.render.dilation,
                sh_degree: self.render.sh_degree,
            },
            raster: RasterConfig {
                alpha_min: self.render.alpha_min,
                alpha_cap: self.render.alpha_cap,
                transmittance_min: self.render.transmittance_min,
            },
            loss: LossConfig {
                ssim_weight: self.loss.ssim_weight,
                ..LossConfig::default()
            },
            hyper: self.optimizer.to_hyper(self.train.batch_size as u32)?,
            densify: self.densify.to_config(self.train.max_gaussians),
        })
    }
}

/// Loads the config file (or defaults when absent) and applies
/// `section.key=value` overrides.
pub fn load_config(path: Option<&str>, overrides: &[String]) -> Result<Config> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {p}"))?;
            text.parse()
                .with_context(|| format!("parsing config {p}"))?
        }
        None => toml::Table::new(),
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let config: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e| anyhow!("invalid config: {e}"))?;
    Ok(config)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, value) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form section.key=value"))?;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.len() < 2 {
        bail!("override path {path:?} must name section.key");
    }
    // Infer the TOML type: bool, integer, float, then string.
    let parsed: toml::Value = if let Ok(b) = value.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Ok(i) = value.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = value.parse::<f64>() {
        toml::Value::Float(f)
    } else {
        toml::Value::String(value.to_string())
    };
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override path {path:?} crosses a non-table value"))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

pub fn dump_defaults() -> String {
    toml::to_string_pretty(&Config::default()).expect("defaults serialize")
}
