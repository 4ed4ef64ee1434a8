//! `manner`: train, enhance, eval and bench subcommands.
//!
//! Exit codes: 0 success, 2 configuration or usage, 3 audio or corpus data,
//! 4 checkpoint, 5 runtime failure (including divergence).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use manner::{Error, Variant};

#[derive(Parser, Debug)]
#[command(name = "manner", version, about = "Time-domain speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a run configuration; writes best.ckpt, last.ckpt and train.log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding data.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Enhance one WAV file or every WAV in a directory.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        input: PathBuf,
    },
    /// SI-SNR of enhanced and unprocessed audio against the clean references.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the per-utterance table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        noisy_dir: PathBuf,
        clean_dir: PathBuf,
    },
    /// Median inference time and peak tensor memory per signal length.
    Bench {
        /// Model config; without it (or a checkpoint) the default model is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        /// Bench one variant; by default full and small are compared.
        #[arg(long)]
        variant: Option<Variant>,
        /// Signal lengths in seconds, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
        lengths: Vec<f64>,
        #[arg(long, default_value_t = manner::bench::MIN_RUNS)]
        runs: usize,
        /// Write bench_<variant>.csv files into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Audio(_) | Error::Corpus(_) | Error::Wav(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 5,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("MANNER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MANNER_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Train { config, variant, seed, out, checkpoint } => {
            commands::train(&config, variant, seed, out, checkpoint)
        }
        Command::Enhance { checkpoint, out, input } => commands::enhance(&checkpoint, &input, &out),
        Command::Eval { checkpoint, out, noisy_dir, clean_dir } => {
            commands::eval(&checkpoint, &noisy_dir, &clean_dir, out.as_deref())
        }
        Command::Bench { config, checkpoint, variant, lengths, runs, out } => {
            commands::bench(config.as_deref(), checkpoint.as_deref(), variant, &lengths, runs, out.as_deref())
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
