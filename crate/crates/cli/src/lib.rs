//! `nssl` command line: the full pipeline behind one binary.
//!
//! Subcommands: `train`, `embed`, `probe`, `robustness`, `analyze`,
//! `curate`, `flops`. Every artifact-producing run writes a
//! `run_manifest.json` into its output directory holding the resolved
//! configuration, seed, tool version, and input digests; outputs are a pure
//! function of that manifest minus its timestamps.
//!
//! Exit codes: 0 success, 1 input or validation error, 2 numerical failure.

use std::ffi::OsString;

use clap::Parser;

pub mod commands;
pub mod config;
pub mod manifest;

use nssl_core::analysis::AnalysisError;
use nssl_core::augment::AugmentError;
use nssl_core::dataio::DataError;
use nssl_core::encoder::EncoderError;
use nssl_core::objectives::ObjectiveError;
use nssl_core::pixels::PixelError;
use nssl_core::probe::ProbeError;
use nssl_core::stain::StainError;
use nssl_core::tensor::TensorError;
use nssl_core::trainer::TrainerError;

/// Failures split by exit code: bad input versus numerical trouble.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => m,
        }
    }

    fn input(e: impl std::fmt::Display) -> Self {
        CliError::Input(e.to_string())
    }

    fn numerical(e: impl std::fmt::Display) -> Self {
        CliError::Numerical(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::input(e)
    }
}

impl From<PixelError> for CliError {
    fn from(e: PixelError) -> Self {
        CliError::input(e)
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        CliError::input(e)
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::numerical(e)
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Tensor(t) => CliError::numerical(t),
            other => CliError::input(other),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        CliError::numerical(e)
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::NonFinite { .. } => CliError::numerical(e),
            TrainerError::Tensor(t) => CliError::numerical(t),
            TrainerError::Objective(o) => CliError::numerical(o),
            TrainerError::Encoder(inner) => CliError::from(inner),
            other => CliError::input(other),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::ZeroVariance { .. } | ProbeError::Singular(_) => CliError::numerical(e),
            ProbeError::Tensor(t) => CliError::numerical(t),
            other => CliError::input(other),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Config(_) => CliError::input(e),
            other => CliError::numerical(other),
        }
    }
}

impl From<StainError> for CliError {
    fn from(e: StainError) -> Self {
        match e {
            StainError::EmDidNotConverge { .. } | StainError::DegenerateStains => {
                CliError::numerical(e)
            }
            other => CliError::input(other),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "nssl",
    version,
    about = "Self-supervised learning on nucleus image patches",
    disable_help_subcommand = true
)]
struct Cli {
    /// Worker pool size for data-parallel stages. All reductions are
    /// deterministic, so outputs do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand, Debug)]
enum Command {
    /// Self-supervised training on a cell manifest.
    Train(commands::train::TrainArgs),
    /// Embed manifest cells with a trained checkpoint.
    Embed(commands::embed::EmbedArgs),
    /// Linear probing of frozen embeddings.
    Probe(commands::probe::ProbeArgs),
    /// Stain-normalization robustness: re-embed under reference bases and
    /// compare neighborhoods.
    Robustness(commands::robustness::RobustnessArgs),
    /// Spatial autocorrelation of gene expression over the embedding kNN
    /// graph.
    Analyze(commands::analyze::AnalyzeArgs),
    /// Pick representative slides by k-medoids over slide embeddings.
    Curate(commands::curate::CurateArgs),
    /// Forward-pass FLOPs for an encoder preset.
    Flops(commands::flops::FlopsArgs),
}

/// Parse and dispatch. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Explicitly requested help or version renders to stdout and
            // succeeds; everything else, including a bare `nssl`, is usage
            // text on stderr and an input error.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 1 };
        }
    };

    if let Some(workers) = cli.workers {
        if workers == 0 {
            eprintln!("error: --workers must be at least 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: worker pool: {e}");
            return 1;
        }
    }

    let outcome = match cli.command {
        Command::Train(args) => commands::train::run(args),
        Command::Embed(args) => commands::embed::run(args),
        Command::Probe(args) => commands::probe::run(args),
        Command::Robustness(args) => commands::robustness::run(args),
        Command::Analyze(args) => commands::analyze::run(args),
        Command::Curate(args) => commands::curate::run(args),
        Command::Flops(args) => commands::flops::run(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Seed resolution: explicit flag, then config file, then `NSSL_SEED`,
/// then zero.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = file {
        return Ok(s);
    }
    match std::env::var("NSSL_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|_| CliError::Input(format!("NSSL_SEED `{v}` is not a u64"))),
        Err(_) => Ok(0),
    }
}
