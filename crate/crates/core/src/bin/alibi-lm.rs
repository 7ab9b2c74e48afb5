use std::path::PathBuf;
use std::process::ExitCode;

use alibi_lm::cli::{self, Command, RunConfig, RunOptions, SEED_ENV};
use alibi_lm::{EvalMode, Error};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alibi-lm", about = "Train and evaluate position methods for length extrapolation")]
struct Args {
    #[command(subcommand)]
    command: Cmd,

    /// Flat TOML run config; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Checkpoint to evaluate (eval / sweep).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Comma-separated validation lengths, e.g. 64,128,256.
    #[arg(long, global = true, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,

    #[arg(long, global = true)]
    mode: Option<String>,

    #[arg(long, global = true)]
    stride: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train one model; writes a checkpoint and training log.
    Train,
    /// Evaluate a checkpoint at one L_valid.
    Eval,
    /// Evaluate a checkpoint over several L_valid values.
    Sweep,
    /// Train one model per method and write a merged sweep.
    Compare,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension { .. } => "dimension",
        Error::DegenerateRow { .. } => "degenerate_row",
        Error::Index { .. } => "index",
        Error::Rank { .. } => "rank",
        Error::Argument(_) => "argument",
        Error::Io { .. } => "io",
        Error::EmptyCorpus(_) => "empty_corpus",
        Error::Divergence(_) => "divergence",
        Error::Checkpoint(_) => "checkpoint",
        Error::ConfigMismatch(_) => "config_mismatch",
        Error::Config(_) => "config",
        Error::Csv(_) => "csv",
    }
}

fn execute(args: Args) -> alibi_lm::Result<()> {
    let mut config = match &args.config {
        Some(path) => cli::load_config(path)?,
        None => RunConfig::default(),
    };
    config.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    for p in config.missing_paths() {
        eprintln!("warning: {} does not exist", p.display());
    }
    let options = RunOptions {
        out: args.out,
        checkpoint: args.checkpoint,
        lengths: args.lengths,
        mode: args.mode.as_deref().map(str::parse::<EvalMode>).transpose()?,
        stride: args.stride,
    };
    let command = match args.command {
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Sweep => Command::Sweep,
        Cmd::Compare => Command::Compare,
    };
    let report = cli::run(command, config, &options)?;
    for path in &report.artifacts {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error[{}]: {msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
