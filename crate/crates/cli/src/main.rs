//! `quire`: command-line front end for the sparse-attention toolkit.
//!
//! Subcommands cover the whole pipeline: `ingest` turns OCR page lines into
//! a normalized document file, `maskgen` builds context plan files for a
//! masking strategy, `maskviz` renders a plan as a PGM image, `bench` times
//! the attention kernels across strategies and sequence lengths, and
//! `train` / `eval` run the masked-LM on a configured corpus.
//!
//! Every command is deterministic given its flags: the same invocation
//! writes the same bytes (timing lines on stderr and measured milliseconds
//! inside bench reports excepted).
//!
//! Exit codes: 0 on success, 1 for runtime failures (IO, non-finite loss,
//! failed bench assertions), 2 for usage and validation errors.

mod cmd;
mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use quire_core::mask::MaskError;
use quire_core::model::ModelError;
use quire_core::ocr::OcrError;
use quire_core::spatial::SpatialError;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

// ---------------------------------------------------------------------------
// Error classification
// ---------------------------------------------------------------------------

/// A command failure, split by exit code: bad flags, config values, or
/// malformed input files are usage errors (exit 2); IO failures and faults
/// inside an otherwise valid run are runtime errors (exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    /// Config-style validation failures are always usage errors.
    pub fn from_validation(err: ModelError) -> Self {
        CliError::Usage(err.to_string())
    }

    pub fn from_ocr(err: OcrError) -> Self {
        match err {
            OcrError::Io(e) => CliError::Runtime(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }

    pub fn from_mask(err: MaskError) -> Self {
        match err {
            MaskError::Io(e) => CliError::Runtime(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }

    pub fn from_spatial(err: SpatialError) -> Self {
        CliError::Usage(err.to_string())
    }

    pub fn from_model(err: ModelError) -> Self {
        match err {
            ModelError::Config(_)
            | ModelError::TokenOutOfRange { .. }
            | ModelError::CoordOutOfRange { .. }
            | ModelError::SequenceTooLong { .. }
            | ModelError::Checkpoint(_)
            | ModelError::Json(_) => CliError::Usage(err.to_string()),
            ModelError::Mask(e) => CliError::from_mask(e),
            ModelError::Ocr(e) => CliError::from_ocr(e),
            ModelError::NonFiniteLoss { .. }
            | ModelError::LoaderStopped { .. }
            | ModelError::Attention(_) => CliError::Runtime(err.to_string()),
            ModelError::Io(e) => CliError::Runtime(e.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

/// Display impl body for ValueEnum types: reuse clap's kebab-case names so
/// report strings and flag values never drift apart.
macro_rules! fmt_value_enum {
    () => {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            let name = self
                .to_possible_value()
                .expect("no skipped variants")
                .get_name()
                .to_owned();
            write!(f, "{name}")
        }
    };
}

#[derive(Parser)]
#[command(
    name = "quire",
    version,
    about = "Sparse attention contexts and a desk-scale multimodal masked LM"
)]
pub struct Cli {
    /// Seed for every random choice the command makes. For `train`, omit to
    /// use the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML config file with [model], [train], and [corpus] tables.
    /// Required by `train` and `eval`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for plan building and attention kernels. Results are
    /// identical for every thread count.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Parse OCR page lines, stack pages, normalize boxes, write a document.
    Ingest {
        /// Input file: one JSON page object per line.
        #[arg(long)]
        input: PathBuf,
        /// Output document path (single JSON object).
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a context plan file (.cpln) for a masking strategy.
    Maskgen(MaskgenArgs),
    /// Render a plan file as a portable graymap (PGM) image.
    Maskviz {
        /// Plan file written by `maskgen`.
        #[arg(long)]
        plan: PathBuf,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time attention kernels over a strategy x sequence-length grid.
    Bench(BenchArgs),
    /// Train the masked LM on the configured corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the configured corpus.
    Eval(EvalArgs),
}

/// Masking strategy names as used on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    /// Centered sliding window (--window).
    Sw,
    /// Blocked sliding window plus random blocks (--blocks, --rand).
    Swrand,
    /// Spatially nearest tokens by box center (--context).
    Distance,
    /// Spatial keys paired with sliding-window values (--window, --context).
    Hybrid,
}

impl fmt::Display for StrategyArg {
    fmt_value_enum!();
}

/// Synthetic layout used when no document file is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    /// One word per line; reading order matches spatial order.
    ReadingOrder,
    /// Two columns per line; reading order interleaves the columns.
    TwoColumn,
}

#[derive(Args)]
pub struct MaskgenArgs {
    /// Strategy to build.
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,

    /// Sequence length for a synthetic layout. Mutually exclusive with
    /// --doc.
    #[arg(long)]
    pub len: Option<usize>,

    /// Ingested document file; its token count and box centers are used.
    #[arg(long)]
    pub doc: Option<PathBuf>,

    /// Synthetic layout when --len is given [default: two-column for
    /// spatial strategies, reading-order otherwise].
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,

    /// Window size in tokens. Even values are rounded down to the next odd
    /// size so the window can be centered.
    #[arg(long)]
    pub window: Option<usize>,

    /// Block size in tokens (swrand).
    #[arg(long)]
    pub blocks: Option<usize>,

    /// Random context blocks per query block (swrand).
    #[arg(long)]
    pub rand: Option<usize>,

    /// Spatial context size in tokens (distance, hybrid). For hybrid it
    /// defaults to the (odd) window size and must match it.
    #[arg(long)]
    pub context: Option<usize>,

    /// Output plan path. Hybrid writes two sibling files with `.key` and
    /// `.value` inserted before the extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Strategies to include.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "sw,swrand,distance,hybrid,full"
    )]
    pub strategies: Vec<BenchStrategyArg>,

    /// Sequence lengths to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
    pub sizes: Vec<usize>,

    /// Context budget per token (window and kNN sizes derive from it).
    #[arg(long, default_value_t = 128)]
    pub context: usize,

    /// Timed repetitions per cell after one untimed warmup (minimum 3).
    #[arg(long, default_value_t = 5)]
    pub reps: usize,

    /// Model width of the random tensors.
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,

    /// Memory budget per cell; cells whose estimated footprint exceeds it
    /// are recorded as failed instead of run.
    #[arg(long, default_value_t = 2.0)]
    pub memory_budget_gib: f64,

    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Bench strategies: the four gathered regimes plus dense full attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchStrategyArg {
    Sw,
    Swrand,
    Distance,
    Hybrid,
    Full,
}

impl fmt::Display for BenchStrategyArg {
    fmt_value_enum!();
}

#[derive(Args)]
pub struct TrainArgs {
    /// Steps to run now; defaults to the remaining configured total.
    #[arg(long)]
    pub steps: Option<u64>,

    /// Checkpoint path written after the run.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Resume from this checkpoint; its embedded model and train config win
    /// over the config file, which still supplies the corpus.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    let threads = if cli.threads == 0 { 1 } else { cli.threads };
    match cli.command {
        Command::Ingest { input, output } => cmd::ingest::run(&input, &output),
        Command::Maskgen(args) => cmd::maskgen::run(&args, seed.unwrap_or(0), threads),
        Command::Maskviz { plan, out } => cmd::maskgen::viz(&plan, &out),
        Command::Bench(args) => cmd::bench::run(&args, seed.unwrap_or(0), threads),
        Command::Train(args) => {
            cmd::train::run_train(&args, cli.config.as_deref(), seed, threads)
        }
        Command::Eval(args) => cmd::train::run_eval(&args, cli.config.as_deref(), threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_surface_parses() {
        let cli = Cli::parse_from([
            "quire", "--seed", "7", "--threads", "2", "maskgen", "--strategy", "sw", "--len",
            "64", "--window", "9", "--out", "plan.cpln",
        ]);
        assert_eq!(cli.seed, Some(7));
        assert_eq!(cli.threads, 2);
        match cli.command {
            Command::Maskgen(args) => {
                assert_eq!(args.strategy, StrategyArg::Sw);
                assert_eq!(args.len, Some(64));
                assert_eq!(args.window, Some(9));
            }
            _ => panic!("expected maskgen"),
        }
    }

    #[test]
    fn bench_lists_split_on_commas() {
        let cli = Cli::parse_from([
            "quire",
            "bench",
            "--strategies",
            "sw,full",
            "--sizes",
            "256,512",
        ]);
        match cli.command {
            Command::Bench(args) => {
                assert_eq!(
                    args.strategies,
                    vec![BenchStrategyArg::Sw, BenchStrategyArg::Full]
                );
                assert_eq!(args.sizes, vec![256, 512]);
                assert_eq!(args.reps, 5);
            }
            _ => panic!("expected bench"),
        }
    }

    #[test]
    fn unknown_strategy_is_rejected_by_the_parser() {
        let parsed = Cli::try_parse_from([
            "quire", "maskgen", "--strategy", "dense", "--len", "8", "--out", "p",
        ]);
        assert!(parsed.is_err());
    }

    #[test]
    fn error_classification_maps_io_to_runtime() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert!(matches!(
            CliError::from_ocr(OcrError::Io(io)),
            CliError::Runtime(_)
        ));
        assert!(matches!(
            CliError::from_ocr(OcrError::ZeroGlobalExtent),
            CliError::Usage(_)
        ));
        assert!(matches!(
            CliError::from_mask(MaskError::ZeroParam("window")),
            CliError::Usage(_)
        ));
        assert!(matches!(
            CliError::from_model(ModelError::NonFiniteLoss { step: 3, loss: f64::NAN }),
            CliError::Runtime(_)
        ));
        assert!(matches!(
            CliError::from_model(ModelError::Config("bad".into())),
            CliError::Usage(_)
        ));
    }

    #[test]
    fn strategy_names_round_trip_through_display() {
        assert_eq!(StrategyArg::Sw.to_string(), "sw");
        assert_eq!(StrategyArg::Hybrid.to_string(), "hybrid");
        assert_eq!(BenchStrategyArg::Full.to_string(), "full");
        assert_eq!(BenchStrategyArg::Swrand.to_string(), "swrand");
    }
}
