//! Pipeline driver behind the `trader` executable.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use trader_core::CoreError;

pub use config::RunConfig;

/// Invalid configuration; exits with status 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

/// A required input artifact is absent or belongs to another configuration; exits with status 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArtifactError {
    Missing { kind: &'static str, path: PathBuf },
    Stale { path: PathBuf, found: String, expected: String },
}

impl std::fmt::Display for ArtifactError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Missing { kind, path } => write!(f, "missing {kind} {}; run the stage that produces it first", path.display()),
            Self::Stale { path, found, expected } => {
                write!(f, "{} has config hash {found}, expected {expected}; rerun the earlier stages", path.display())
            }
        }
    }
}

impl std::error::Error for ArtifactError {}

#[derive(Debug, Parser)]
#[command(name = "trader", version, about = "Train and evaluate an ensemble of trading policies")]
struct Cli {
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Debug, Subcommand)]
enum Stage {
    /// Load an OHLCV CSV into the output directory.
    Ingest(StageArgs),
    /// Generate a synthetic market into the output directory.
    Synth(StageArgs),
    /// Build the four demonstration datasets.
    GenExperts(StageArgs),
    /// Train one base policy per demonstration dataset.
    TrainDiverse(StageArgs),
    /// Train the policy selector over the frozen base policies.
    TrainMeta(StageArgs),
    /// Evaluate base policies, the selector and the baselines on the test split.
    Backtest(StageArgs),
    /// Combine the backtest results into one report.
    Report(StageArgs),
}

#[derive(Debug, Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv`, runs one stage and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.stage) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_status(&e)
        }
    }
}

fn dispatch(stage: Stage) -> anyhow::Result<()> {
    let (name, args) = match &stage {
        Stage::Ingest(a) => ("ingest", a),
        Stage::Synth(a) => ("synth", a),
        Stage::GenExperts(a) => ("gen-experts", a),
        Stage::TrainDiverse(a) => ("train-diverse", a),
        Stage::TrainMeta(a) => ("train-meta", a),
        Stage::Backtest(a) => ("backtest", a),
        Stage::Report(a) => ("report", a),
    };
    let cfg = RunConfig::load(&args.config)?.with_overrides(args.seed, args.out.clone());
    cfg.validate()?;
    log::info!("{name}: config hash {}, output {}", cfg.hash(), cfg.output_dir.display());
    match stage {
        Stage::Ingest(_) => pipeline::ingest(&cfg),
        Stage::Synth(_) => pipeline::synth(&cfg),
        Stage::GenExperts(_) => pipeline::gen_experts(&cfg),
        Stage::TrainDiverse(_) => pipeline::train_diverse(&cfg),
        Stage::TrainMeta(_) => pipeline::train_meta(&cfg),
        Stage::Backtest(_) => pipeline::backtest(&cfg),
        Stage::Report(_) => pipeline::report(&cfg),
    }
}

/// 1 for configuration and missing-input problems, 3 for everything else.
pub fn exit_status(e: &anyhow::Error) -> i32 {
    if e.is::<ValidationError>() || e.is::<ArtifactError>() {
        return 1;
    }
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_)) => 1,
        _ => 3,
    }
}

/// Installs the logger; verbosity comes from `TRADER_LOG` (default `warn`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("TRADER_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}
