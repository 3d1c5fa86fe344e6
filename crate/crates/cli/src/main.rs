//! `stepwise`: corpus partitioning, staged training, retrieval index,
//! segmentation, evaluation and the tutoring service from one binary.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "stepwise", version, about = "Guided-tutoring fine-tuning pipeline at desk scale")]
pub struct Cli {
    /// Output style for reports.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text, env = "STEPWISE_FORMAT")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    /// JSON on standard output.
    Structured,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a corpus into an MFT set and a local set by overlap score.
    SplitData(SplitArgs),
    /// Run three-phase fine-tuning (or the single-phase baseline).
    Train(TrainArgs),
    /// Run the session suites per variant and print the ablation report.
    Eval(EvalArgs),
    /// Embed a corpus into a vector index file.
    BuildIndex(IndexArgs),
    /// Print the subtask plan for a source file.
    Segment(SegmentArgs),
    /// Interactive tutoring loop on standard input.
    Session(SessionArgs),
    /// Serve the tutoring HTTP API.
    Serve(ServeArgs),
    /// Write a synthetic corpus with known structure.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Line-delimited JSON corpus.
    #[arg(long, env = "STEPWISE_CORPUS")]
    pub corpus: PathBuf,
    /// Overlap score at or above which a sampled record is local.
    #[arg(long, default_value_t = stepwise_core::overlap::DEFAULT_THRESHOLD, env = "STEPWISE_THRESHOLD")]
    pub threshold: f64,
    #[arg(long, default_value_t = 0, env = "STEPWISE_SEED")]
    pub seed: u64,
    /// Directory for manifest.json and heatmap.csv.
    #[arg(long, default_value = ".", env = "STEPWISE_OUT_DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Line-delimited JSON corpus with a category on every line.
    #[arg(long, env = "STEPWISE_CORPUS")]
    pub corpus: PathBuf,
    /// Pruning threshold on |gamma|.
    #[arg(long, default_value_t = stepwise_core::train::DEFAULT_PRUNE_TAU, env = "STEPWISE_TAU")]
    pub tau: f64,
    /// Structural-risk weight.
    #[arg(long, default_value_t = stepwise_core::train::DEFAULT_LAMBDA, env = "STEPWISE_LAMBDA")]
    pub lambda: f64,
    #[arg(long, default_value_t = 0, env = "STEPWISE_SEED")]
    pub seed: u64,
    /// Epochs per phase.
    #[arg(long, default_value_t = 20, env = "STEPWISE_EPOCHS")]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5, env = "STEPWISE_LR")]
    pub lr: f64,
    /// Train one merged phase instead of three.
    #[arg(long, env = "STEPWISE_SINGLE_PHASE")]
    pub single_phase: bool,
    /// Directory for the checkpoints.
    #[arg(long, default_value = ".", env = "STEPWISE_OUT_DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding llm2.ckpt, llm3.ckpt and single.ckpt.
    #[arg(long, default_value = ".", env = "STEPWISE_MODELS")]
    pub models: PathBuf,
    /// Variants to run; all when omitted.
    #[arg(long, value_delimiter = ',', env = "STEPWISE_VARIANT")]
    pub variant: Vec<String>,
    /// First adversarial seed.
    #[arg(long, default_value_t = 0, env = "STEPWISE_SEED")]
    pub seed: u64,
    /// Number of adversarial seeds; each runs every task.
    #[arg(long, default_value_t = 25, env = "STEPWISE_SEEDS")]
    pub seeds: u64,
    /// Skip the trained-model suite.
    #[arg(long, env = "STEPWISE_MOCK_ONLY")]
    pub mock_only: bool,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long, env = "STEPWISE_CORPUS")]
    pub corpus: PathBuf,
    /// Output index file.
    #[arg(long, default_value = "index.bin", env = "STEPWISE_INDEX")]
    pub out: PathBuf,
    /// Number of clusters; 0 keeps a flat index.
    #[arg(long, default_value_t = 0, env = "STEPWISE_CLUSTERS")]
    pub clusters: usize,
    #[arg(long, default_value_t = 0, env = "STEPWISE_SEED")]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Source file; standard input when omitted.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Scripted,
    Adversarial,
    Model,
    Remote,
}

#[derive(Debug, Args)]
pub struct TutorArgs {
    /// Generation backend; --backend-url implies remote.
    #[arg(long, value_enum, default_value_t = BackendKind::Scripted, env = "STEPWISE_BACKEND")]
    pub backend: BackendKind,
    #[arg(long, env = "STEPWISE_BACKEND_URL")]
    pub backend_url: Option<String>,
    /// Checkpoint for the model backend.
    #[arg(long, env = "STEPWISE_MODEL")]
    pub model: Option<PathBuf>,
    /// Knowledge index built by build-index.
    #[arg(long, env = "STEPWISE_INDEX")]
    pub index: Option<PathBuf>,
    /// Retrieved items per turn.
    #[arg(long, default_value_t = 4, env = "STEPWISE_K")]
    pub k: usize,
    #[arg(long, default_value_t = 2, env = "STEPWISE_NPROBE")]
    pub nprobe: usize,
    /// Minimum retrieval score.
    #[arg(long, default_value_t = stepwise_core::vectordb::DEFAULT_RELEVANCE_THRESHOLD, env = "STEPWISE_THRESHOLD")]
    pub threshold: f64,
    #[arg(long, default_value_t = 0, env = "STEPWISE_SEED")]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    /// Reference solution for the task.
    #[arg(long, env = "STEPWISE_TASK")]
    pub task: PathBuf,
    #[command(flatten)]
    pub tutor: TutorArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080, env = "STEPWISE_PORT")]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1", env = "STEPWISE_HOST")]
    pub host: String,
    #[command(flatten)]
    pub tutor: TutorArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    /// Disjoint-vocabulary records with a few planted near-duplicates.
    Planted,
    /// Four-category curriculum for staged training.
    Curriculum,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, value_enum)]
    pub kind: FixtureKind,
    #[arg(long, default_value_t = 100)]
    pub size: usize,
    #[arg(long, default_value_t = 0, env = "STEPWISE_SEED")]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
