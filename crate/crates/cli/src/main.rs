use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gbst_core::profiler::CountingAlloc;
use gbst_core::Error;

mod commands;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

/// Byte-level encoder-decoder with a gradient-based subword tokenization
/// frontend.
///
/// Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
/// 3 numerical abort.
#[derive(Parser, Debug)]
#[command(name = "gbst", version)]
struct Cli {
    /// Flat `key = value` run configuration; unset keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides `train.seed`, which also seeds model initialization.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory for the resolved config, logs, checkpoints and reports.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Span-corruption pre-training on the configured corpus.
    Pretrain,
    /// Fine-tuning on `text<TAB>label` lines with the GBST layer frozen.
    Finetune {
        /// Labelled data; overrides `data.finetune`.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Starting checkpoint; overrides `data.init_checkpoint`.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Block-score matrix (streams × byte positions) and an ASCII heatmap.
    ScoreViz {
        /// Model to inspect. Without one, a fresh model is built from the
        /// config and seed.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Read the text from a file instead of the argument.
        #[arg(long, value_name = "PATH", conflicts_with = "text")]
        file: Option<PathBuf>,
        text: Option<String>,
    },
    /// Finite-difference gradient check per parameter group.
    Gradcheck {
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// FLOP counts and training-step throughput for the identity frontend and
    /// GBST with downsampling rates 1 to 4.
    ///
    /// Timing assumes the process has the CPU to itself; run nothing else
    /// alongside it. Set `profile.bench_steps = 0` to skip timing.
    Profile,
    /// Compares the GBST forward pass against the loop reference on random
    /// small instances.
    OracleTest {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NumericalAbort(_) | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
