//! `renet`: ingest, synthesize, train, evaluate, forecast and ablate.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "renet", version, about = "Recurrent event network for temporal knowledge graphs")]
pub struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "RENET_OUTPUT_DIR", default_value = "renet-out")]
    pub out: PathBuf,
    /// Name of the run directory under the output root (defaults to the command).
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Suppress progress output.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Normalize quadruple files into a dataset archive.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset from a motif spec.
    Synthesize(SynthArgs),
    /// Train a model and keep the best validation epoch.
    Train(TrainArgs),
    /// Rank the validation or test split.
    Eval(EvalArgs),
    /// Predict objects for `(s, r)` queries some steps ahead.
    Forecast(ForecastArgs),
    /// Compare aggregators and inference modes over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// Train, valid and test files, in that order.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VALID", "TEST"], conflicts_with = "events")]
    pub splits: Option<Vec<PathBuf>>,
    /// A single file, split by time.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Input lines are `s r o start end` spans.
    #[arg(long, requires = "events")]
    pub spans: bool,
    /// Step between expanded span timestamps.
    #[arg(long, default_value_t = 1)]
    pub unit: u64,
    /// Drop expanded timestamps before this value.
    #[arg(long, default_value_t = 0)]
    pub cutoff: u64,
    /// Entities and relations are string labels.
    #[arg(long)]
    pub labeled: bool,
    #[arg(long, requires = "labeled")]
    pub entity_vocab: Option<PathBuf>,
    #[arg(long, requires = "labeled")]
    pub relation_vocab: Option<PathBuf>,
    /// Ignore columns after the fourth.
    #[arg(long)]
    pub allow_extra_fields: bool,
    #[arg(long)]
    pub num_entities: Option<usize>,
    #[arg(long)]
    pub num_relations: Option<usize>,
    /// Train, valid and test fractions for `--events`.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VALID", "TEST"])]
    pub fractions: Option<Vec<f64>>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Motif spec (`num_entities`, `num_relations`, `num_slices`, `noise`, `motif` lines).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// none, mean, attn or rgcn.
    #[arg(long)]
    pub aggregator: Option<String>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub slices_per_step: Option<usize>,
    #[arg(long)]
    pub bptt_window: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

#[derive(Args, Clone, Default)]
pub struct InferFlags {
    /// Subjects sampled per generated graph.
    #[arg(long = "M")]
    pub samples: Option<usize>,
    /// Triples kept per generated graph.
    #[arg(long = "k")]
    pub top_k: Option<usize>,
    #[arg(long, overrides_with = "no_multi")]
    pub multi: bool,
    #[arg(long, overrides_with = "multi")]
    pub no_multi: bool,
    /// Score only this many steps past the history.
    #[arg(long)]
    pub dt: Option<usize>,
    /// Score only horizons of at least this many steps.
    #[arg(long)]
    pub dt_min: Option<usize>,
    #[arg(long)]
    pub infer_seed: Option<u64>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset archive directory.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub infer: InferFlags,
    /// Also write a checkpoint every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Add a seconds column to the loss CSV.
    #[arg(long)]
    pub timing: bool,
    /// Skip per-epoch validation and keep the last epoch.
    #[arg(long)]
    pub no_validate: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// raw, filtered or both.
    #[arg(long)]
    pub filter: Option<String>,
    /// Replace the subject head (`s`) or both subject and relation heads
    /// (`sr`) with training frequencies.
    #[arg(long)]
    pub empirical: Option<String>,
    #[command(flatten)]
    pub infer: InferFlags,
}

#[derive(Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// History: every slice of this archive.
    #[arg(long)]
    pub data: PathBuf,
    /// Lines of `s r` or `s r o` (ids or labels), tab separated.
    #[arg(long)]
    pub queries: PathBuf,
    /// Steps past the last observed slice.
    #[arg(long, default_value_t = 1)]
    pub dt: usize,
    /// Candidates listed per query.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "M")]
    pub samples: Option<usize>,
    #[arg(long = "k")]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub no_multi: bool,
    #[arg(long)]
    pub infer_seed: Option<u64>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "none,mean,attn,rgcn")]
    pub aggregators: Vec<String>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub infer: InferFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", commands::error_code(&e));
            ExitCode::FAILURE
        }
    }
}
