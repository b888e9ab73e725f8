//! Command-line driver for the discovery/detection pipeline.
//!
//! Exit codes: 0 success, 1 stage failure, 2 configuration or I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use egodisc_core::pipeline::{run_pipeline, PipelineConfig, PipelineError, Stage, StageReport};

#[derive(Parser)]
#[command(
    name = "egodisc",
    version,
    about = "Self-supervised object discovery and few-shot detection on a synthetic RGB-D world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON pipeline config; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the pipeline seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config output_dir, then ./out).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test datasets.
    Simulate(CommonArgs),
    /// Run every stage end to end with caching.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        /// Run a single stage instead of the whole pipeline.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Match proposals across neighboring frames; dumps matches and triplets.
    Associate(CommonArgs),
    /// Train the embedding from cached matches and embed both datasets.
    Train(CommonArgs),
    /// Cluster the training embeddings and evaluate discovery.
    Discover(CommonArgs),
    /// Run the few-shot and cluster-labeled detectors on the test world.
    Detect(CommonArgs),
    /// Evaluate detections into the final report.
    Eval(CommonArgs),
}

fn load_config(common: &CommonArgs) -> Result<(PipelineConfig, PathBuf), PipelineError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<PipelineConfig>(&text).map_err(|e| {
                PipelineError::Config(format!("{}:{}: {e}", path.display(), e.line()))
            })?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let output = common
        .output
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((config, output))
}

fn print_reports(reports: &[StageReport]) {
    for r in reports {
        if r.cached {
            println!("[{}] cached ({})", r.stage.name(), r.detail);
        } else {
            println!("[{}] {}", r.stage.name(), r.detail);
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (common, stages): (&CommonArgs, Vec<Stage>) = match &cli.command {
        Command::Simulate(c) => (c, vec![Stage::Simulate]),
        Command::Pipeline { common, stage } => {
            let stages = match stage {
                Some(name) => vec![name.parse::<Stage>().map_err(PipelineError::Config)?],
                None => Stage::all().to_vec(),
            };
            (common, stages)
        }
        Command::Associate(c) => (c, vec![Stage::Associate]),
        Command::Train(c) => (c, vec![Stage::Train, Stage::Embed]),
        Command::Discover(c) => (c, vec![Stage::Discover]),
        Command::Detect(c) => (c, vec![Stage::Detect]),
        Command::Eval(c) => (c, vec![Stage::Eval]),
    };
    let (config, output) = load_config(common)?;
    let reports = run_pipeline(&config, &output, &stages)?;
    print_reports(&reports);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
