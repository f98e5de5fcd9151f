//! `procdiff`: synthesize procedural-activity corpora, pre-train the
//! matching + diffusion model, run the fine-tuning protocols, and evaluate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 integrity or
//! compatibility failure, 5 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use procdiff::error::Error;

#[derive(Parser)]
#[command(name = "procdiff", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory from a config.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train encoder and denoiser on a corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an epoch-boundary checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a linear probe over the frozen encoder.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune the denoiser for next-step forecasting (frozen encoder).
    FinetuneForecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune the denoiser for activity classification (frozen encoder).
    FinetuneActivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// classify | forecast | activity
        #[arg(long)]
        task: String,
        /// approximate | expectation | oracle
        #[arg(long, default_value = "approximate")]
        mode: String,
        /// Samples for oracle mode.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Samples for expectation mode.
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Render comparison CSV and SVG charts from report files.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Report JSON files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("PROCDIFF_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> procdiff::Result<()> {
    match cli.command {
        Command::GenCorpus { config, out, seed } => commands::cmd_gen_corpus(&config, &out, seed),
        Command::Pretrain { config, corpus, out, checkpoint, seed } => {
            commands::cmd_pretrain(&config, &corpus, &out, checkpoint.as_deref(), seed)
        }
        Command::Probe { config, corpus, checkpoint, out, seed } => {
            commands::cmd_probe(&config, &corpus, &checkpoint, &out, seed)
        }
        Command::FinetuneForecast { config, corpus, checkpoint, out, seed } => {
            commands::cmd_finetune_forecast(&config, &corpus, &checkpoint, &out, seed)
        }
        Command::FinetuneActivity { config, corpus, checkpoint, out, seed } => {
            commands::cmd_finetune_activity(&config, &corpus, &checkpoint, &out, seed)
        }
        Command::Eval { checkpoint, corpus, task, mode, k, samples, out, seed } => {
            commands::cmd_eval(&commands::EvalArgs {
                checkpoint,
                corpus,
                task,
                mode,
                k,
                samples,
                out,
                seed,
            })
        }
        Command::Report { out, files } => commands::cmd_report(&files, &out),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidInput(_) => 2,
        Error::Io(_) => 3,
        Error::Integrity(_) => 4,
        Error::Numeric(_) => 5,
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
