//! `asr`: synthesize data, extract features, train, evaluate, and
//! transcribe with the asr-core pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{EvalArgs, TrainArgs};
use config::RunConfig;

/// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "asr",
    version,
    about = "A from-scratch CTC speech recognition pipeline",
    after_help = RunConfig::help_text(),
    arg_required_else_help = true
)]
struct Cli {
    /// Config file of `key = value` lines; flags and --set override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for every random choice; fixed seed + single thread is
    /// bit-reproducible.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for feature extraction. Training math is always
    /// single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Override one config key, e.g. --set optim.epochs=3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic tone audio plus train/dev/test manifests
    SynthData {
        /// Output directory for WAVs and manifests
        #[arg(long)]
        out: PathBuf,
    },
    /// Write normalized log-mel features of one WAV as an FMX1 file
    Featurize {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an acoustic model and keep the best-dev-WER checkpoint
    Train {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        dev_manifest: PathBuf,
        /// Output directory for checkpoints and the CSV log
        #[arg(long)]
        out: PathBuf,
        /// Override optim.epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Override model.arch (jasper | quartznet)
        #[arg(long)]
        arch: Option<String>,
        /// Apply masking augmentation to training features
        #[arg(long)]
        augment: bool,
    },
    /// Report pooled corpus WER of a checkpoint over a manifest
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Use prefix beam search with this width instead of greedy
        #[arg(long)]
        beam: Option<usize>,
        /// Where to write the CSV row
        #[arg(long, default_value = "eval.csv")]
        csv: PathBuf,
    },
    /// Print one transcript line per WAV, in argument order
    Transcribe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.load_file(path)?;
    }
    config.apply_sets(&cli.sets)?;

    match cli.command {
        Command::SynthData { out } => commands::cmd_synth_data(&config, cli.seed, &out),
        Command::Featurize { wav, out } => commands::cmd_featurize(&config, &wav, &out),
        Command::Train {
            train_manifest,
            dev_manifest,
            out,
            epochs,
            arch,
            augment,
        } => {
            if let Some(epochs) = epochs {
                config.set("optim.epochs", &epochs.to_string())?;
            }
            if let Some(arch) = arch {
                config.set("model.arch", &arch)?;
            }
            commands::cmd_train(
                &config,
                cli.seed,
                cli.threads,
                &TrainArgs {
                    train_manifest,
                    dev_manifest,
                    out_dir: out,
                    augment,
                },
            )
        }
        Command::Eval {
            checkpoint,
            manifest,
            beam,
            csv,
        } => commands::cmd_eval(&EvalArgs {
            checkpoint,
            manifest,
            beam,
            csv,
        }),
        Command::Transcribe { checkpoint, wavs } => commands::cmd_transcribe(&checkpoint, &wavs),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
