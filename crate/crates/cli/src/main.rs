//! `spiketim` command-line interface.
//!
//! Exit codes: 0 success, 1 failed check, 2 configuration or I/O error, 3 non-finite training abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spiketim::attention::AttentionMode;

#[derive(Parser)]
#[command(
    name = "spiketim",
    version,
    about = "Spiking transformer with temporal interaction: training, evaluation and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Dotted-path config override such as `training.alpha=0.0`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Training seed; takes precedence over SPIKETIM_SEED and the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone)]
pub struct OptionalConfigArgs {
    /// JSON run configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Dotted-path config override; repeatable. Needs --config.
    #[arg(long = "override", value_name = "KEY=VALUE", requires = "config")]
    pub overrides: Vec<String>,
    /// Seed; takes precedence over SPIKETIM_SEED and the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, confusion.json and checkpoints to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run with the same config and seed.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Evaluation threads; 1 keeps runs bit-reproducible.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Evaluate a checkpoint; prints accuracy and confusion matrix as JSON.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which part of the configured data to evaluate on.
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Evaluation threads.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Finite-difference gradient checks on the micro model in 64-bit.
    Gradcheck {
        #[command(flatten)]
        config: OptionalConfigArgs,
        /// Probe at most this many coordinates per end-to-end parameter tensor.
        #[arg(long)]
        max_coords: Option<usize>,
        /// Test hook: corrupt a backward kernel to confirm the suite catches it.
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Train one model per alpha (writes alpha_sweep.csv) and optionally per attention mode (mode_sweep.csv).
    AblateAlpha {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated alphas, at least two distinct values.
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        /// Comma-separated attention modes to compare at the configured alpha.
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Vec<AttentionMode>,
        /// Comma-separated seeds for the mode sweep; defaults to the resolved training seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Evaluation threads.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Write the synthetic temporal-order task as event files.
    SynthData {
        #[command(flatten)]
        config: OptionalConfigArgs,
        /// Output directory; defaults to <output_dir>/synthetic from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of samples.
        #[arg(long)]
        samples: Option<usize>,
        /// File format.
        #[arg(long, value_enum, default_value_t = Format::Evs1)]
        format: Format,
    },
    /// Print the exact number of trainable parameters.
    ParamCount {
        /// JSON run configuration.
        #[arg(short, long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Dotted-path config override; repeatable. Needs --config.
        #[arg(long = "override", value_name = "KEY=VALUE", requires = "config")]
        overrides: Vec<String>,
        /// Model preset: paper_scale, desk or micro.
        #[arg(long)]
        preset: Option<String>,
        /// Attention mode to count.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AttentionMode>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Fault {
    ConvBackward,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Evs1,
    Csv,
}

fn parse_mode(s: &str) -> Result<AttentionMode, String> {
    s.parse().map_err(|e: spiketim::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            resume,
            threads,
        } => commands::train(&config, resume.as_deref(), threads),
        Command::Eval {
            config,
            checkpoint,
            split,
            threads,
        } => commands::eval(&config, &checkpoint, split, threads),
        Command::Gradcheck {
            config,
            max_coords,
            inject_fault,
        } => commands::gradcheck(&config, max_coords, inject_fault),
        Command::AblateAlpha {
            config,
            alphas,
            modes,
            seeds,
            threads,
        } => commands::ablate(&config, &alphas, &modes, &seeds, threads),
        Command::SynthData {
            config,
            out,
            samples,
            format,
        } => commands::synth_data(&config, out, samples, format),
        Command::ParamCount {
            config,
            overrides,
            preset,
            mode,
        } => commands::param_count(config.as_deref(), &overrides, preset.as_deref(), mode),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
