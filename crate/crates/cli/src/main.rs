//! Command-line interface: `train`, `eval`, `sweep`, `export-embeddings`,
//! and `synth`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure (divergence).

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use closr_core::ErrorKind;

use config::Mode;

#[derive(Parser)]
#[command(
    name = "closr",
    version,
    about = "Contrastive anomaly detection and open-set recognition for network flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonOpts {
    /// Flat `key = value` config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; every stochastic component derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Name of the label column in the CSV.
    #[arg(long)]
    label_column: Option<String>,
    /// Label value marking benign traffic.
    #[arg(long)]
    benign_label: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct SplitOpts {
    /// Comma-separated class names withheld from training (zero-day).
    #[arg(long, value_delimiter = ',')]
    zero_day: Option<Vec<String>>,
    /// Fraction of each non-zero-day class routed to the train side.
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct TrainHyperOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    f_o: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Square the distance terms of the loss.
    #[arg(long)]
    squared: Option<bool>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Post-scaling absolute feature cap.
    #[arg(long)]
    clamp_bound: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Input flow CSV.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log path (default: `<out>.log`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// clad = binary anomaly detection, closr = open-set recognition.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Train on the whole file instead of splitting first.
    #[arg(long)]
    no_split: bool,
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    split: SplitOpts,
    #[command(flatten)]
    hyper: TrainHyperOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation CSV (a test set, or the full file with --use-split).
    #[arg(long)]
    data: PathBuf,
    /// Report output path (the report is always printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-derive the train/test split and evaluate on the test half.
    #[arg(long)]
    use_split: bool,
    /// Force binary (clad) or open-set (closr) evaluation; default follows
    /// the checkpoint head count.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Class proxy: centroid, median, trimmed-mean, medoid, neighbour.
    #[arg(long)]
    proxy: Option<String>,
    /// Reference CSV for non-centroid proxies and threshold calibration.
    #[arg(long)]
    proxy_data: Option<PathBuf>,
    /// OOD score variant: weighted-gaussian, gaussian, energy.
    #[arg(long)]
    ood_score: Option<String>,
    /// Explicit decision threshold.
    #[arg(long, conflicts_with = "target_fpr")]
    tau: Option<f64>,
    /// Derive the threshold from a benign false-positive budget.
    #[arg(long)]
    target_fpr: Option<f64>,
    /// Score dump CSV path.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    split: SplitOpts,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Input flow CSV.
    #[arg(long)]
    data: PathBuf,
    /// Aggregated CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Swept hyperparameter: margin or alpha.
    #[arg(long)]
    param: String,
    #[arg(long)]
    from: Option<f64>,
    #[arg(long)]
    to: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// Explicit value list (alternative to --from/--to/--step).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    split: SplitOpts,
    #[command(flatten)]
    hyper: TrainHyperOpts,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input CSV to embed.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonOpts,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output CSV path; a `<out>.manifest.json` sidecar names the zero-day
    /// classes.
    #[arg(long)]
    out: PathBuf,
    /// Total class count including benign.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 20)]
    features: usize,
    /// Pairwise distance between class means.
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    /// How many trailing malicious classes to flag for holdout.
    #[arg(long, default_value_t = 1)]
    zero_day_count: usize,
    #[command(flatten)]
    common: CommonOpts,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint with centroids embedded.
    Train(TrainArgs),
    /// Score a dataset against a checkpoint and report metrics.
    Eval(EvalArgs),
    /// Train/evaluate across a margin or alpha grid.
    Sweep(SweepArgs),
    /// Dump embeddings and centroid distances for external plotting.
    #[command(name = "export-embeddings")]
    ExportEmbeddings(ExportArgs),
    /// Generate a synthetic flow dataset.
    Synth(SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
        Command::ExportEmbeddings(args) => commands::export::run(args),
        Command::Synth(args) => commands::synth::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err.kind() {
                ErrorKind::Config => ExitCode::from(2),
                ErrorKind::Data => ExitCode::from(3),
                ErrorKind::Numeric => ExitCode::from(4),
            }
        }
    }
}
