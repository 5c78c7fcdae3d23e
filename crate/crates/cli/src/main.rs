//! Command-line entry points: synthesize datasets, train, render, evaluate,
//! and run the optimizer/load-balancing experiments.
//!
//! Exit codes: 0 success, 1 user error (arguments, config, missing files),
//! 2 internal error.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "grendel-mini", version, about = "CPU gaussian-splat training with simulated multi-worker parallelism")]
struct Cli {
    /// Config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<String>,

    /// Override a config value: --set section.key=value (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Master seed; overrides train.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest, images, points).
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: String,
    },
    /// Train on the configured scene and write checkpoints plus metrics.
    Train,
    /// Render one camera of a checkpoint to an image file.
    Render {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        manifest: String,
        /// Camera id from the manifest.
        #[arg(long)]
        camera: u32,
        /// Output image path (.ppm or .png).
        #[arg(long)]
        out: String,
    },
    /// Report PSNR/SSIM of a checkpoint against ground truth.
    Eval {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        manifest: String,
        /// CSV output path (stdout table is always printed).
        #[arg(long)]
        out: Option<String>,
        /// Evaluate every view instead of the test split.
        #[arg(long)]
        all_views: bool,
    },
    /// Run an analysis experiment and write its CSV.
    Experiment {
        #[command(subcommand)]
        which: ExperimentCommand,
    },
    /// Inspect configuration.
    Config {
        /// Print the full default configuration as TOML.
        #[arg(long)]
        dump_defaults: bool,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Variance of the batch-mean gradient vs batch size.
    GradVariance {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        manifest: String,
        #[arg(long)]
        out: String,
        #[arg(long, default_value = "1,2,4,8,16,32")]
        batch_sizes: String,
        #[arg(long, default_value_t = 32)]
        trials: usize,
        /// Parameter group: position|sh_dc|sh_rest|opacity|scale|rotation.
        #[arg(long, default_value = "sh_dc")]
        group: String,
    },
    /// Cumulative-update similarity of scaling rules vs the b=1 baseline.
    Trajectory {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        manifest: String,
        #[arg(long)]
        out: String,
        #[arg(long, default_value = "4,16")]
        batch_sizes: String,
        /// Total images each run consumes.
        #[arg(long, default_value_t = 1024)]
        horizon: u64,
        #[arg(long, default_value_t = 128)]
        log_every: u64,
        #[arg(long, default_value = "sh_dc")]
        group: String,
        /// Also run the unscaled-momentum variants.
        #[arg(long)]
        with_unscaled_momentum: bool,
    },
    /// Imbalance ratio with rebalancing on vs off on a left-heavy scene.
    LoadbalanceBench {
        #[arg(long)]
        out: String,
        #[arg(long, default_value_t = 12)]
        iterations: u64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version exit 0; real argument errors are user errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(commands::CliError::User(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
        Err(commands::CliError::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    let mut cfg = config::load_config(cli.config.as_deref(), &cli.overrides)
        .map_err(commands::CliError::User)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Synth { out } => commands::cmd_synth(&cfg, &out),
        Command::Train => commands::cmd_train(&cfg),
        Command::Render {
            checkpoint,
            manifest,
            camera,
            out,
        } => commands::cmd_render(&cfg, &checkpoint, &manifest, camera, &out),
        Command::Eval {
            checkpoint,
            manifest,
            out,
            all_views,
        } => commands::cmd_eval(&cfg, &checkpoint, &manifest, out.as_deref(), all_views),
        Command::Experiment { which } => match which {
            ExperimentCommand::GradVariance {
                checkpoint,
                manifest,
                out,
                batch_sizes,
                trials,
                group,
            } => commands::cmd_grad_variance(
                &cfg,
                &checkpoint,
                &manifest,
                &out,
                &batch_sizes,
                trials,
                &group,
            ),
            ExperimentCommand::Trajectory {
                checkpoint,
                manifest,
                out,
                batch_sizes,
                horizon,
                log_every,
                group,
                with_unscaled_momentum,
            } => commands::cmd_trajectory(
                &cfg,
                &checkpoint,
                &manifest,
                &out,
                &batch_sizes,
                horizon,
                log_every,
                &group,
                with_unscaled_momentum,
            ),
            ExperimentCommand::LoadbalanceBench { out, iterations } => {
                commands::cmd_loadbalance(&cfg, &out, iterations)
            }
        },
        Command::Config { dump_defaults } => {
            if dump_defaults {
                print!("{}", config::dump_defaults());
            } else {
                println!("use --dump-defaults to print the default configuration");
            }
            Ok(())
        }
    }
}
