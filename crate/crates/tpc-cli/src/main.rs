//! `tpc` — train, evaluate, benchmark and inspect the adaptive
//! token-halting transformer from the command line.

mod config;
mod ops;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ops::CliError;

#[derive(Parser)]
#[command(name = "tpc", version, about = "Adaptive token-halting ViT engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config file (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. -O model.tpc.kappa=60
    #[arg(short = 'O', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and optional plots.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Also emit loss.svg and depth.svg.
        #[arg(long)]
        plots: bool,
    },
    /// Evaluate a checkpoint on the config's eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare dense vs schedule-halved forward throughput.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Layers before all non-CLS tokens stop (default depth/2).
        #[arg(long)]
        full_layers: Option<usize>,
    },
    /// Run a few training steps and dump the full token trace.
    Trace {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value = "runs/trace")]
        out: PathBuf,
    },
    /// Print the analytic parameter and FLOPs ledger.
    Flops {
        /// Architecture preset: deit-t, deit-s or deit-b.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
        /// JSON array of per-layer active token counts.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Train once per value of a config axis and aggregate the results.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Axis spec, e.g. --axis model.tpc.kappa=20,40,60,80,100,120,140
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, seed, out, plots } => {
            let cfg = config::load_config(config.config.as_deref(), &config.overrides)?;
            ops::cmd_train(cfg, seed, &out, plots)
        }
        Command::Eval { checkpoint, config } => {
            let cfg = config::load_config(config.config.as_deref(), &config.overrides)?;
            ops::cmd_eval(&checkpoint, cfg)
        }
        Command::Bench { config, seed, reps, warmup, full_layers } => {
            let cfg = config::load_config(config.config.as_deref(), &config.overrides)?;
            ops::cmd_bench(cfg, seed, reps, warmup, full_layers)
        }
        Command::Trace { config, seed, steps, out } => {
            let cfg = config::load_config(config.config.as_deref(), &config.overrides)?;
            ops::cmd_trace(cfg, seed, steps, &out)
        }
        Command::Flops { preset, config, schedule } => {
            let cfg = if preset.is_none() {
                Some(config::load_config(config.config.as_deref(), &config.overrides)?)
            } else {
                None
            };
            ops::cmd_flops(preset.as_deref(), cfg, schedule.as_deref())
        }
        Command::Sweep { config, axis, seed, out } => {
            let axis = ops::parse_axis(&axis)?;
            ops::cmd_sweep(config.config.as_deref(), &config.overrides, &axis, seed, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
