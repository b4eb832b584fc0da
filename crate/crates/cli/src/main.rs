//! `adakd`: train a teacher, distill a student, evaluate checkpoints and emit
//! diagnostic reports.

mod commands;
mod rundir;
mod selfcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use adakd_core::CoreError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "adakd", version, about = "Token-adaptive knowledge distillation for tiny language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every run-producing subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config value by dotted path; repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory. Defaults to `$ADAKD_RUNS_DIR/<subcommand>`, or
    /// `runs/<subcommand>` when the variable is unset.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for this invocation; replaces the seed list from the config.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Overwrite a completed run in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Entropy,
    Alignment,
    Evolution,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the teacher by NLL on the training responses.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a student from a frozen teacher, once per seed.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; overrides `teacher.checkpoint`. A teacher is
        /// trained into `<out>/teacher` when neither is given.
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
    },
    /// Score a checkpoint with ROUGE-L on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Token-group diagnostics for a student checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path, or a name such as `step_500` looked up in
        /// `<run>/checkpoints`.
        #[arg(long, value_name = "PATH|NAME")]
        checkpoint: String,
        /// Distillation run directory used to resolve checkpoint names.
        #[arg(long, value_name = "DIR", default_value = ".")]
        run: PathBuf,
        /// Teacher checkpoint; overrides `teacher.checkpoint`.
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        report: ReportKind,
        /// Number of training batches pooled into the probe.
        #[arg(long, default_value_t = 4)]
        batches: usize,
    },
    /// Fast invariant suite over the numeric core.
    Selfcheck,
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::DatasetRecord { .. } | CoreError::Dataset(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<adakd_nn::NnError> for CliError {
    fn from(e: adakd_nn::NnError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher { common } => commands::train_teacher(&common),
        Command::Distill { common, teacher } => commands::distill(&common, teacher),
        Command::Eval { common, checkpoint } => commands::eval(&common, &checkpoint),
        Command::Analyze { common, checkpoint, run, teacher, report, batches } => {
            commands::analyze(&common, &commands::AnalyzeArgs { checkpoint, run, teacher, report, batches })
        }
        Command::Selfcheck => selfcheck::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.message().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(e.code())
        }
    }
}
