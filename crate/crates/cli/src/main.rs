use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod report;

/// Exit status for a usage error (bad flags, conflicting or invalid inputs).
pub const EXIT_USAGE: u8 = 2;
/// Exit status for a numeric failure (divergence, non-finite values).
pub const EXIT_NUMERIC: u8 = 3;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("LSVT_GIT_DESCRIBE"));

#[derive(Debug, Parser)]
#[command(name = "lsvt", version = VERSION, about = "SVT and learned SVT for low-rank matrix recovery")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LSVT_THREADS")]
    threads: Option<usize>,

    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a measurement operator and train/validation/test instances.
    GenData(GenDataArgs),
    /// Train the unrolled network and write a checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate SVT or a trained checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Sweep T = 2..6 over one or more datasets, SVT next to LSVT.
    Compare(CompareArgs),
    /// Compare SVT and LSVT across (τ, δ) initializations.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub r: usize,
    /// Number of measurements.
    #[arg(long, conflicts_with = "oversample", required_unless_present = "oversample")]
    pub m: Option<usize>,
    /// Measurements as a multiple of the degrees of freedom r(2d - r).
    #[arg(long)]
    pub oversample: Option<f64>,
    /// Train, validation and test sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [5000, 1000, 1000], conflicts_with = "paper_scale")]
    pub sizes: Vec<usize>,
    /// Use 50000/10000/1000 instances.
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub batch: usize,
    #[arg(long, default_value_t = 200)]
    pub patience: usize,
    #[arg(long, default_value_t = 500)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub val_every: usize,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of layers; the network has T - 1 hidden layers.
    #[arg(long = "T", value_parser = clap::value_parser!(u64).range(1..))]
    pub t: u64,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Initial threshold (default 5d).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Initial step size (default 1.2 d²/m).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV (default `<out>/history.csv`).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    Svt,
    Lsvt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub solver: SolverKind,
    /// SVT threshold (default 5d).
    #[arg(long)]
    pub tau: Option<f64>,
    /// SVT step size (default 1.2 d²/m).
    #[arg(long)]
    pub delta: Option<f64>,
    /// SVT iteration count T.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Checkpoint directory (required for `--solver lsvt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// JSON report path (printed to stdout when omitted).
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Per-instance CSV path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Dataset directories, one table row each.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Layer counts to sweep.
    #[arg(long = "T", value_delimiter = ',', default_values_t = [2, 3, 4, 5, 6])]
    pub t: Vec<usize>,
    /// Checkpoint cache; missing checkpoints are trained and stored here.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Output directory for `compare.csv` and `compare.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "T", default_value_t = 4)]
    pub t: usize,
    /// `tau:delta` pairs.
    #[arg(
        long,
        value_delimiter = ',',
        default_values = ["5:1", "50:0.5", "50:2.10", "100:2.10", "200:5", "300:5"]
    )]
    pub pairs: Vec<String>,
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Output directory for `grid.csv` and `grid.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let log = commands::Log { quiet: cli.quiet };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a, log),
        Command::Train(a) => commands::train(&a, log),
        Command::Eval(a) => commands::eval(&a, log),
        Command::Compare(a) => commands::compare(&a, log),
        Command::Grid(a) => commands::grid(&a, log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
