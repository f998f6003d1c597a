//! `wmark`: train a classifier, learn a watermark, evaluate, sweep and
//! report, driven by one JSON experiment config.
//!
//! Every artifact is a pure function of (config, seed); wall-clock
//! timestamps only appear in `run.log`. Exit codes: 0 success, 2 usage or
//! config error, 3 data-format error, 1 anything else.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod runlog;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wmark_core::metrics::Positive;

pub use commands::{EvalOptions, MaskSpec};
pub use config::ExperimentConfig;
pub use error::CliError;

use runlog::RunLog;

#[derive(Debug, Parser)]
#[command(name = "wmark", version, about = "Watermarking for out-of-distribution detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PositiveArg {
    Id,
    Ood,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the classifier; writes the checkpoint, normalizer and accuracy.
    TrainClassifier(Common),
    /// Learn a watermark for the trained classifier.
    LearnWatermark(Common),
    /// Score ID and OOD test data; writes metrics, scores and histograms.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Add the learned watermark to every input.
        #[arg(long)]
        watermark: bool,
        /// Watermark file in the seed directory (default watermark.wmkw).
        #[arg(long)]
        watermark_file: Option<String>,
        /// keep_large:<chi> or keep_small:<chi>; chi may be p<percentile> of |w|.
        #[arg(long)]
        mask: Option<String>,
        /// Name for the output files (default plain / watermarked / masked).
        #[arg(long)]
        tag: Option<String>,
        /// Positive class for AUPR.
        #[arg(long, value_enum, default_value = "id")]
        aupr_positive: PositiveArg,
    },
    /// Coordinate-wise random search of watermark hyperparameters on
    /// validation OOD data.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Override the config's trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Aggregate metrics over seeds into summary.csv and plot data.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory (default: the config's output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, Vec<u64>), CliError> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.check_files()?;
    let seeds = match common.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    Ok((cfg, seeds))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainClassifier(c) => {
            let (cfg, seeds) = load(&c)?;
            let log = RunLog::open(&cfg.output_dir)?;
            commands::for_each_seed(&seeds, |s| commands::train_classifier_seed(&cfg, s, &log))
        }
        Command::LearnWatermark(c) => {
            let (cfg, seeds) = load(&c)?;
            let log = RunLog::open(&cfg.output_dir)?;
            commands::for_each_seed(&seeds, |s| commands::learn_watermark_seed(&cfg, s, &log))
        }
        Command::Evaluate {
            common,
            watermark,
            watermark_file,
            mask,
            tag,
            aupr_positive,
        } => {
            let opts = EvalOptions {
                watermark,
                watermark_file,
                mask: mask.as_deref().map(MaskSpec::parse).transpose()?,
                tag,
                positive: match aupr_positive {
                    PositiveArg::Id => Positive::Id,
                    PositiveArg::Ood => Positive::Ood,
                },
            };
            opts.validate()?;
            let (cfg, seeds) = load(&common)?;
            let log = RunLog::open(&cfg.output_dir)?;
            commands::for_each_seed(&seeds, |s| commands::evaluate_seed(&cfg, s, &opts, &log))
        }
        Command::Sweep { common, trials } => {
            let (cfg, seeds) = load(&common)?;
            let trials = trials.unwrap_or(cfg.sweep.trials);
            let log = RunLog::open(&cfg.output_dir)?;
            commands::for_each_seed(&seeds, |s| commands::sweep_seed(&cfg, s, trials, &log))
        }
        Command::Report { config, out } => {
            let run = match (out, config) {
                (Some(out), _) => out,
                (None, Some(path)) => ExperimentConfig::from_path(&path)?.output_dir,
                (None, None) => return Err(CliError::Usage("report needs --out or --config".into())),
            };
            if !run.is_dir() {
                return Err(CliError::Usage(format!("no runs found: {} is not a directory", run.display())));
            }
            let log = RunLog::open(&run)?;
            commands::report(&run, &log).map(|_| ())
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
