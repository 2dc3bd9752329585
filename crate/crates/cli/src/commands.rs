//! The three subcommands: run an experiment from a config file, generate
//! synthetic dataset files, and evaluate a checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedsim_core::data::{gen_synthetic, load_dataset, save_dataset, ChannelStats, PreprocessOpts};
use fedsim_core::error::{Error, Result};
use fedsim_core::fed::{evaluate, run_federation, EvalCropMode, Federation, FederationOutcome};
use fedsim_core::model::{load_params, save_params, InputShape, ModelSpec};

use crate::config::{parse_config, resolve, synthetic_split_seeds, ResolvedExperiment};

/// Intra-round parallelism from FEDSIM_THREADS (0 or 1 = sequential).
/// Unset defaults to the machine's available parallelism; results are
/// identical either way.
fn threads_from_env(env: Option<String>) -> Result<usize> {
    match env {
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Some(raw) => raw.parse().map_err(|_| {
            Error::Config(format!("FEDSIM_THREADS must be a non-negative integer, got \"{raw}\""))
        }),
    }
}

fn metrics_csv(outcome: &FederationOutcome) -> String {
    let mut csv = String::from("round,global_test_loss,global_test_acc\r\n");
    for record in &outcome.rounds {
        let _ = write!(
            csv,
            "{},{},{}\r\n",
            record.round, record.global_test_loss, record.global_test_acc
        );
    }
    csv
}

fn write_artifacts(exp: &ResolvedExperiment, outcome: &FederationOutcome) -> Result<()> {
    std::fs::create_dir_all(&exp.output_dir)?;
    let snapshot = toml::to_string_pretty(&exp.config)
        .map_err(|e| Error::Config(format!("cannot serialize resolved config: {e}")))?;
    std::fs::write(exp.output_dir.join("config_resolved.toml"), snapshot)?;
    if exp.emit_csv {
        std::fs::write(exp.output_dir.join("metrics.csv"), metrics_csv(outcome))?;
    }
    if exp.emit_json {
        let last = outcome
            .rounds
            .last()
            .ok_or_else(|| Error::Protocol("run produced no rounds".into()))?;
        let json = serde_json::to_string_pretty(last)
            .map_err(|e| Error::Config(format!("cannot serialize round record: {e}")))?;
        std::fs::write(exp.output_dir.join("clients_final.json"), json)?;
    }
    save_params(&outcome.params, &exp.output_dir.join("checkpoint.fspm"))?;
    Ok(())
}

pub fn cmd_run(config_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config_path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let exp = resolve(parse_config(&text)?)?;
    let threads = threads_from_env(std::env::var("FEDSIM_THREADS").ok())?;
    let stats = exp.train.stats().clone();
    let fed = Federation {
        spec: &exp.spec,
        config: &exp.federation,
        train: &exp.train,
        test: &exp.test,
        plan: &exp.plan,
        preprocess: &exp.preprocess,
        stats: &stats,
    };
    let outcome = run_federation(&fed, threads)?;
    write_artifacts(&exp, &outcome)?;
    let last = outcome.rounds.last().expect("at least one round");
    println!(
        "completed {} rounds: test accuracy {:.4}, test loss {:.4} ({})",
        last.round,
        last.global_test_acc,
        last.global_test_loss,
        exp.output_dir.display()
    );
    Ok(())
}

pub struct GenSynthArgs {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_gen_synth(args: &GenSynthArgs) -> Result<()> {
    let test_per_class = args
        .test_per_class
        .unwrap_or_else(|| (args.per_class / 4).max(1));
    let (train_seed, test_seed) = synthetic_split_seeds(args.seed);
    let train = gen_synthetic(
        args.classes,
        args.per_class,
        args.channels,
        args.height,
        args.width,
        train_seed,
    )?;
    let test = gen_synthetic(
        args.classes,
        test_per_class,
        args.channels,
        args.height,
        args.width,
        test_seed,
    )?;
    std::fs::create_dir_all(&args.out)?;
    save_dataset(&train, &args.out.join("train.fsds"))?;
    save_dataset(&test, &args.out.join("test.fsds"))?;
    println!(
        "wrote {} train and {} test examples to {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub model: String,
    pub hidden: usize,
    /// Standardization statistics source; defaults to the eval dataset
    /// itself. Point this at the training split to reproduce a run's
    /// evaluation exactly.
    pub stats_dataset: Option<PathBuf>,
    pub crop: Option<(usize, usize)>,
    pub standardize: bool,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let params = load_params(&args.checkpoint)?;
    let dataset = load_dataset(&args.dataset)?;
    let (crop_height, crop_width) = args
        .crop
        .unwrap_or((dataset.height(), dataset.width()));
    let opts = PreprocessOpts {
        crop_height,
        crop_width,
        flip_prob: 0.0,
        standardize: args.standardize,
    };
    let input = InputShape::Image {
        channels: dataset.channels(),
        height: crop_height,
        width: crop_width,
    };
    let spec = match args.model.as_str() {
        "mlp" => ModelSpec::mlp(input, args.hidden, dataset.classes())?,
        "small_cnn" => ModelSpec::small_cnn(input, dataset.classes())?,
        other => {
            return Err(Error::Config(format!(
                "model must be \"mlp\" or \"small_cnn\", got \"{other}\""
            )))
        }
    };
    if spec.layout() != params.layout {
        return Err(Error::Layout(format!(
            "checkpoint layout does not match a {} model over {}x{}x{} inputs with {} classes",
            args.model,
            dataset.channels(),
            crop_height,
            crop_width,
            dataset.classes()
        )));
    }
    let stats = match &args.stats_dataset {
        Some(path) => ChannelStats::of(&load_dataset(path)?),
        None => dataset.stats().clone(),
    };
    let (accuracy, loss) = evaluate(&spec, &params, &dataset, &stats, &opts, EvalCropMode::Center)?;
    println!(
        "{}",
        serde_json::json!({ "accuracy": accuracy, "loss": loss })
    );
    Ok(())
}
