//! `vcfes`: viewpoint-conditioned re-identification pipeline.
//!
//! Exit codes: 0 success, 2 usage or config, 3 numerical failure,
//! 4 format mismatch, 5 empty or degenerate data.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ConfigArgs;

#[derive(Debug, Parser)]
#[command(name = "vcfes", version, about = "Viewpoint-conditioned re-identification pipeline")]
struct Cli {
    /// Add wall-clock timestamps to logs and reports.
    #[arg(long, global = true)]
    timestamps: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(commands::SynthArgs),
    /// Train the projection heads.
    Train(ConfigArgs),
    /// Project a dataset split and write a gallery index.
    Gallery(ConfigArgs),
    /// Rank the gallery for one query image.
    Query {
        #[command(flatten)]
        config: ConfigArgs,
        /// Image id of the query, looked up in the query manifest.
        #[arg(long)]
        image_id: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// `global_only`, `largest_view` or `all_views`.
        #[arg(long, default_value = "all_views")]
        mode: String,
        /// Write the rank table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a query split against a gallery index, one report per mode.
    Eval(ConfigArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(commands::GradcheckArgs),
}

/// Bad arguments or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Numerical failure outside the core error type (e.g. gradcheck over tolerance).
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use vcfes_core::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<NumericFailure>().is_some() {
        return 3;
    }
    match err.downcast_ref::<E>() {
        Some(E::NonFiniteLoss | E::MissingPrototypes) => 3,
        Some(E::FormatMismatch(_) | E::MalformedFile(_) | E::DimensionMismatch { .. }) => 4,
        Some(
            E::EmptyGallery
            | E::EmptyIndex
            | E::EmptyForeground
            | E::NoRelevant
            | E::DegenerateBatch(_)
            | E::DegenerateDataset(_)
            | E::DuplicateImageId(_),
        ) => 5,
        _ => 2,
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("VCFES_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("VCFES_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| UsageError(format!("thread pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let ts = cli.timestamps;
    match cli.command {
        Command::Synth(args) => commands::synth(&args),
        Command::Train(args) => commands::train(&args, ts),
        Command::Gallery(args) => commands::gallery(&args),
        Command::Query {
            config,
            image_id,
            k,
            mode,
            out,
        } => commands::query(&config, &image_id, k, &mode, out.as_deref()),
        Command::Eval(args) => commands::eval(&args, ts),
        Command::Gradcheck(args) => commands::gradcheck(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
