//! Command-line frontend tying the crate's modules into reproducible
//! pipelines. Exit codes: 0 success, 1 check failure, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "microdrive",
    version,
    about = "Desk-scale latent-token driving stack: data generation, two-stage training, evaluation, ablation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scripted dataset (scripts, expert episodes, QA, features).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (defaults under the output root).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Stage-1 pretraining on a generated dataset.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage-2 rollout training (consistency + reinforcement) from a Stage-1 checkpoint.
    RolloutTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint path.
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop evaluation of a checkpoint or the expert oracle.
    EvalClosed {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to evaluate; omit with --expert to run the oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the expert oracle policy instead of a checkpoint.
        #[arg(long)]
        expert: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit per-episode SVG traces.
        #[arg(long)]
        svg: bool,
    },
    /// Open-loop evaluation of a checkpoint on held-out episodes.
    EvalOpen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate ablation rows (default: the full nine-row grid).
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated row ids, e.g. 3,4,6,8,9.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u8>,
    },
    /// Re-render reports from a run directory's logs and verify them.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Re-run a stamped run directory from its embedded config and diff the logs.
    Reproduce {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the default configuration as TOML.
    PrintConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, force } => commands::gen_data(config, out, force),
        Command::Pretrain { config, data, out } => commands::pretrain(config, data, out),
        Command::RolloutTrain { config, data, stage1, out } => {
            commands::rollout_train(config, data, stage1, out)
        }
        Command::EvalClosed { config, checkpoint, expert, out, svg } => {
            commands::eval_closed(config, checkpoint, expert, out, svg)
        }
        Command::EvalOpen { config, checkpoint, out } => commands::eval_open(config, checkpoint, out),
        Command::Ablate { config, data, out, ids } => commands::ablate(config, data, out, ids),
        Command::Report { run } => commands::report(run),
        Command::Reproduce { run } => commands::reproduce(run),
        Command::PrintConfig => commands::print_config(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
