//! `negprompt`: generate synthetic worlds, train prompts, evaluate detectors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use negprompt_core::Scorer;

#[derive(Parser, Debug)]
#[command(
    name = "negprompt",
    version,
    about = "Negative prompt learning for OOD detection"
)]
struct Cli {
    /// Experiment config (`key = value` lines); missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate encoder, vocabulary and feature bundles.
    GenWorld {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train prompts on a generated world.
    Train(TrainArgs),
    /// Score the test sets with a checkpoint.
    Eval(EvalArgs),
    /// Compare encoder gradients against finite differences.
    Gradcheck {
        /// Check the encoder of this world instead of a fresh one from the config.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Negative-stage runs over a grid of loss weights and prompt counts.
    Sweep(SweepArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum StageArg {
    Pos,
    Neg,
    Joint,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Frozen positive checkpoint, required for `--stage neg`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Train on the leading `open_vocab_fraction` of ID classes only.
    #[arg(long)]
    open_vocab: bool,
    /// Use the longer negative-stage schedule.
    #[arg(long)]
    extended_schedule: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScorerArg {
    Mcm,
    Negprompt,
}

impl From<ScorerArg> for Scorer {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::Mcm => Scorer::Mcm,
            ScorerArg::Negprompt => Scorer::NegPrompt,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the config's scorer.
    #[arg(long, value_enum)]
    scorer: Option<ScorerArg>,
    /// Expand the trained contexts to every ID class of the world.
    #[arg(long)]
    open_vocab: bool,
    /// Also write features.csv with test and class features.
    #[arg(long)]
    dump_features: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    beta_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    gamma_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    p_grid: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn thread_count() -> Result<usize, commands::CliError> {
    match std::env::var("NEGPROMPT_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v.trim().parse().map_err(|_| {
            commands::CliError::Usage(format!(
                "NEGPROMPT_THREADS must be a non-negative integer, got `{v}`"
            ))
        }),
    }
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    let threads = thread_count()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| {
            commands::CliError::Usage(format!("cannot start {threads} worker threads: {e}"))
        })?;
    let cfg = commands::load_config(cli.config.as_deref(), cli.seed)?;
    pool.install(|| match cli.command {
        Command::GenWorld { out } => commands::gen_world(&cfg, out),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Eval(a) => commands::eval(&cfg, a),
        Command::Gradcheck { world } => commands::gradcheck(&cfg, world),
        Command::Sweep(a) => commands::sweep(&cfg, a),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("negprompt: {e}");
            ExitCode::FAILURE
        }
    }
}
