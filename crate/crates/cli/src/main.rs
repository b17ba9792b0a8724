use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use esdmb_core::train::Output;
use esdmb_core::Error;

mod commands;

#[derive(Parser)]
#[command(name = "esdmb", version, about = "Train, prune and inspect multi-branch self-distilled CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Branch {
    Main,
    Ensemble,
}

impl From<Branch> for Output {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Main => Output::Main,
            Branch::Ensemble => Output::Ensemble,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run configuration, writing checkpoints and metrics.csv to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report test accuracy of a checkpoint and write its confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration whose data section supplies the test set.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "main")]
        branch: Branch,
        /// Defaults to `<checkpoint>.confusion-<branch>.csv`.
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
    },
    /// Drop every sub-branch and write a main-branch-only checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Parameter and FLOP counts of the ensemble and of its pruned main branch.
    Cost {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        json: bool,
    },
    /// Print the topology and every branch path as a sequence of block names.
    Inspect {
        #[command(flatten)]
        source: Source,
    },
}

#[derive(clap::Args)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Build a freshly initialized model from a run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Train { config, output, resume } => commands::train(&config, output, resume.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            branch,
            confusion,
            batch_size,
        } => commands::eval(&checkpoint, &config, branch.into(), confusion, batch_size),
        Command::Prune { checkpoint, output } => commands::prune(&checkpoint, &output),
        Command::Cost { source, json } => commands::cost(source.checkpoint, source.config, json),
        Command::Inspect { source } => commands::inspect(source.checkpoint, source.config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> ExitCode {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.kind());
    ExitCode::from(if e.is_user_error() { 1 } else { 2 })
}
