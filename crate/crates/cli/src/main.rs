mod commands;
mod error;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Scene database, instruction dataset generation and evaluation.
#[derive(Debug, Parser)]
#[command(name = "drivesql", version)]
pub struct Cli {
    /// Key-value settings file; flags and DRIVESQL_* variables take precedence.
    #[arg(long, global = true, env = "DRIVESQL_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn scenario scripts into canonical annotations.
    Synth(SynthArgs),
    /// Build the scene database from canonical annotations.
    BuildDb(BuildDbArgs),
    /// Generate instruction-response pairs.
    Generate(GenerateArgs),
    /// Re-run verification over a pairs file.
    Verify(VerifyArgs),
    /// Split pairs by scene into train/val/test.
    Split(SplitArgs),
    /// Dataset statistics.
    Stats(StatsArgs),
    /// Score predictions against pairs.
    Eval(EvalArgs),
    /// Write predictions that repeat each pair's own answer.
    GtPredictions(GtPredictionsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON array of scene scripts.
    pub scripts: Option<PathBuf>,
    /// Add the built-in curated risk scenarios.
    #[arg(long)]
    pub curated: bool,
    /// Add this many random scenes.
    #[arg(long, env = "DRIVESQL_RANDOM")]
    pub random: Option<usize>,
    /// Seed for the random scenes.
    #[arg(long, env = "DRIVESQL_SEED")]
    pub seed: Option<u64>,
    /// Also write the combined scripts here.
    #[arg(long)]
    pub scripts_out: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildDbArgs {
    pub annotations: PathBuf,
    /// Important-object radius in meters.
    #[arg(long, env = "DRIVESQL_RADIUS")]
    pub radius: Option<f64>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifierArgs {
    /// External verifier endpoint; offline rules only when absent.
    #[arg(long, env = "DRIVESQL_VERIFIER")]
    pub verifier: Option<String>,
    #[arg(long, env = "DRIVESQL_VERIFIER_TIMEOUT")]
    pub verifier_timeout: Option<f64>,
    #[arg(long, env = "DRIVESQL_VERIFIER_RETRIES")]
    pub verifier_retries: Option<u32>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    pub db: PathBuf,
    #[arg(long, env = "DRIVESQL_SEED")]
    pub seed: Option<u64>,
    /// Windows sampled per scene.
    #[arg(long, env = "DRIVESQL_WINDOWS")]
    pub windows: Option<usize>,
    /// Per-instance questions per subtask and window.
    #[arg(long, env = "DRIVESQL_MAX_INSTANCES")]
    pub max_instances: Option<usize>,
    /// Key-value file with dis, dis_x, dis_y and s.
    #[arg(long, env = "DRIVESQL_THRESHOLDS")]
    pub thresholds: Option<PathBuf>,
    /// Comma-separated subtask names; all when absent.
    #[arg(long, env = "DRIVESQL_SUBTASKS")]
    pub subtasks: Option<String>,
    /// `corrected` or `literal` risk predicates.
    #[arg(long, env = "DRIVESQL_PREDICATE_MODE")]
    pub predicate_mode: Option<String>,
    /// Worker threads; logical cores when absent.
    #[arg(long, env = "DRIVESQL_JOBS")]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub verifier: VerifierArgs,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub pairs: PathBuf,
    /// Database used to check detection instances.
    #[arg(long, env = "DRIVESQL_DB")]
    pub db: Option<PathBuf>,
    #[command(flatten)]
    pub verifier: VerifierArgs,
    /// Where to write rejected pair ids and reasons.
    #[arg(long)]
    pub rejected: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    pub pairs: PathBuf,
    /// Train, val and test weights.
    #[arg(long, env = "DRIVESQL_RATIOS")]
    pub ratios: Option<String>,
    #[arg(long, env = "DRIVESQL_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    pub pairs: PathBuf,
    pub db: PathBuf,
    /// Task-by-view percentage table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub pairs: PathBuf,
    pub predictions: PathBuf,
    #[arg(long, env = "DRIVESQL_IOU")]
    pub iou: Option<f64>,
    /// Add-one smoothing for BLEU.
    #[arg(long, env = "DRIVESQL_BLEU_SMOOTHING")]
    pub bleu_smoothing: Option<bool>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GtPredictionsArgs {
    pub pairs: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
