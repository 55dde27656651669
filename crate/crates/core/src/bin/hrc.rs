use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hrc::config::RunConfig;
use hrc::pipeline::{Pipeline, PipelineError, Stage, StageStatus};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

/// Cluster-level budget allocation: generate data, train, cluster, solve,
/// distill and evaluate.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test CSVs and the ground-truth file.
    Gen(Common),
    /// Train the representation network.
    Train(Common),
    /// Embed the training set, fit K-Means and tabulate cluster statistics.
    Cluster(Common),
    /// Build the budget-indexed strategy library.
    Solve(Common),
    /// Distill the cluster assignment into a feature classifier.
    Distill(Common),
    /// Evaluate the strategy library on the hold-out set.
    Eval(Common),
    /// Compare the strategy library against the baselines.
    Compare(Common),
    /// Run all stages in order, skipping those whose artifacts are current.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Last stage `pipeline` runs (default: eval).
    #[arg(long)]
    stage: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (only, args) = match cli.command {
        Command::Gen(a) => (Some(Stage::Gen), a),
        Command::Train(a) => (Some(Stage::Train), a),
        Command::Cluster(a) => (Some(Stage::Cluster), a),
        Command::Solve(a) => (Some(Stage::Solve), a),
        Command::Distill(a) => (Some(Stage::Distill), a),
        Command::Eval(a) => (Some(Stage::Eval), a),
        Command::Compare(a) => (Some(Stage::Compare), a),
        Command::Pipeline(a) => (None, a),
    };
    match run(only, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                PipelineError::Config(_) => EXIT_CONFIG,
                PipelineError::Stage { .. } => EXIT_STAGE,
            })
        }
    }
}

fn run(only: Option<Stage>, args: Common) -> Result<(), PipelineError> {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| PipelineError::Config(e.to_string()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let last = match (&args.stage, only) {
        (Some(_), Some(s)) => return Err(PipelineError::Config(format!("--stage only applies to `pipeline`, not `{s}`"))),
        (Some(name), None) => Stage::parse(name).ok_or_else(|| PipelineError::Config(format!("unknown stage `{name}`")))?,
        (None, _) => Stage::Eval,
    };
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| PipelineError::Config("no artifact directory: set `out` in the config or pass --out".into()))?;
    let mut pipeline = Pipeline::new(cfg, out)?;
    let statuses = match only {
        Some(stage) => vec![(stage, pipeline.run(stage)?)],
        None => pipeline.run_through(last)?,
    };
    for (stage, status) in statuses {
        let word = match status {
            StageStatus::Ran => "done",
            StageStatus::Skipped => "up to date",
        };
        println!("{stage}: {word}");
    }
    Ok(())
}
