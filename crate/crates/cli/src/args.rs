use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use medbench_core::dataset::TestUnit;
use medbench_core::metrics::Averaging;
use medbench_core::model::TaskKind;
use medbench_core::report::ReportFormat;

#[derive(Debug, Parser)]
#[command(
    name = "bench",
    version,
    about = "Build, run and score structured medical VLM benchmarks",
    args_override_self = true
)]
pub struct Cli {
    /// TOML or JSON file mirroring the command-line flags. Top-level keys
    /// apply to every subcommand that accepts them; a table named after the
    /// subcommand applies to that subcommand only. Explicit flags win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile annotation sources into train/test instruction datasets.
    Build(BuildArgs),
    /// Query an OpenAI-compatible endpoint for every sample of a dataset.
    Infer(InferArgs),
    /// Parse raw responses into predictions.
    Parse(ParseArgs),
    /// Score predictions (or a response log) against a dataset.
    Eval(EvalArgs),
    /// Render one or more evaluation reports side by side.
    Report(ReportArgs),
    /// Emit a training manifest for an external LoRA trainer.
    Manifest(ManifestArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BuildArgs {
    /// Source manifest (TOML or JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub test_size: usize,
    /// Whether --test-size counts images or instruction samples.
    #[arg(long, default_value = "image")]
    pub test_unit: TestUnit,
    /// Allocate the test split proportionally across source kinds.
    #[arg(long)]
    pub stratify: bool,
    /// Replace the built-in question bank (TOML or JSON).
    #[arg(long)]
    pub question_bank: Option<PathBuf>,
    /// Extra label alias, `FROM=TO` (repeatable).
    #[arg(long, value_name = "FROM=TO")]
    pub label_alias: Vec<String>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct InferArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Base URL including the API version, e.g. http://localhost:8000/v1
    #[arg(long)]
    pub endpoint: String,
    #[arg(long)]
    pub model: String,
    /// Response log (JSONL). Appended to; existing entries are skipped.
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum requests in flight.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    /// Backoff base in seconds; retry k waits up to base * 2^k.
    #[arg(long, default_value_t = 1.0)]
    pub backoff_base: f64,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1024)]
    pub max_tokens: u32,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = "MEDBENCH_API_KEY")]
    pub api_key_env: String,
    /// Upload images as stored instead of downscaling wide ones.
    #[arg(long)]
    pub no_resize: bool,
    /// Re-request samples whose logged outcome is a failure.
    #[arg(long)]
    pub retry_failed: bool,
    /// Only run samples of this task.
    #[arg(long)]
    pub task: Option<TaskKind>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ParseArgs {
    /// JSONL with `sample_id` and `response` (or `text`) per line; a response
    /// log works as is.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Task of the responses. Required without --dataset; with it, restricts
    /// parsing to that task.
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Dataset the responses answer: supplies task, label and image bounds.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Dataset JSONL holding the ground truth.
    #[arg(long)]
    pub truth: PathBuf,
    /// Predictions JSONL from `parse`, or a response log from `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    /// A task name or `all`.
    #[arg(long, default_value = "all")]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Pointing distance threshold in pixels (inclusive).
    #[arg(long, default_value_t = medbench_core::metrics::DEFAULT_MATCH_THRESHOLD)]
    pub match_threshold: f64,
    #[arg(long, default_value = "micro")]
    pub averaging: Averaging,
    /// IoU thresholds averaged into mAP, `start:step:stop`.
    #[arg(long, default_value = "0.5:0.05:0.95")]
    pub map_sweep: String,
    /// System name recorded in the report; defaults to the --pred file stem.
    #[arg(long)]
    pub system: Option<String>,
    /// Also print the report as a table.
    #[arg(long, value_name = "FORMAT")]
    pub render: Option<ReportFormat>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ReportArgs {
    /// Evaluation report, as `NAME=PATH` or `PATH` (repeatable, in column order).
    #[arg(long, required = true, value_name = "[NAME=]PATH")]
    pub system: Vec<String>,
    #[arg(long, default_value = "markdown")]
    pub format: ReportFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ManifestArgs {
    /// Training dataset JSONL (normally the `train.jsonl` from `build`).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rank: Option<u32>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub micro_batch_size: Option<u32>,
    #[arg(long)]
    pub gradient_accumulation_steps: Option<u32>,
    #[arg(long)]
    pub eval_interval_steps: Option<u32>,
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Train the vision encoder too.
    #[arg(long)]
    pub unfreeze_vision_encoder: bool,
    /// Defaults to the seed stamped in the dataset.
    #[arg(long)]
    pub seed: Option<u64>,
}
