mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim_core::error::Error;

use commands::{cmd_eval, cmd_gen_synth, cmd_run, EvalArgs, GenSynthArgs};

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Federated averaging simulator: run experiments, generate synthetic datasets, evaluate checkpoints",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation experiment described by a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate train/test synthetic dataset files.
    GenSynth {
        #[arg(long)]
        classes: usize,
        #[arg(long = "per-class")]
        per_class: usize,
        /// Test examples per class; defaults to a quarter of --per-class.
        #[arg(long = "test-per-class")]
        test_per_class: Option<usize>,
        /// Image size as HxW.
        #[arg(long, value_parser = parse_size, default_value = "16x16")]
        size: (usize, usize),
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file; prints JSON to stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Model name: "mlp" or "small_cnn".
        #[arg(long)]
        model: String,
        /// Hidden width when the model is "mlp".
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        /// Dataset file to take standardization statistics from (use the
        /// training split to reproduce a run's own evaluation).
        #[arg(long = "stats-dataset")]
        stats_dataset: Option<PathBuf>,
        /// Center-crop size as HxW; defaults to the full image.
        #[arg(long, value_parser = parse_size)]
        crop: Option<(usize, usize)>,
        /// Skip per-channel standardization.
        #[arg(long = "no-standardize", action = clap::ArgAction::SetFalse)]
        standardize: bool,
    },
}

fn parse_size(raw: &str) -> Result<(usize, usize), String> {
    let (h, w) = raw
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got \"{raw}\""))?;
    let h = h.parse().map_err(|_| format!("bad height in \"{raw}\""))?;
    let w = w.parse().map_err(|_| format!("bad width in \"{raw}\""))?;
    Ok((h, w))
}

/// Exit 2 for configuration, format, and usage problems; 3 for runtime
/// numeric or protocol failures.
fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Numeric(_) | Error::Protocol(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::GenSynth {
            classes,
            per_class,
            test_per_class,
            size,
            channels,
            seed,
            out,
        } => cmd_gen_synth(&GenSynthArgs {
            classes,
            per_class,
            test_per_class,
            height: size.0,
            width: size.1,
            channels,
            seed,
            out,
        }),
        Command::Eval {
            checkpoint,
            dataset,
            model,
            hidden,
            stats_dataset,
            crop,
            standardize,
        } => cmd_eval(&EvalArgs {
            checkpoint,
            dataset,
            model,
            hidden,
            stats_dataset,
            crop,
            standardize,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}
