//! `divan`: corpus ingestion, splitting, training, evaluation and prediction.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Verse-level authorship attribution for classical Persian poetry.
#[derive(Debug, Parser)]
#[command(name = "divan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter a raw corpus and write it with a statistics report.
    Ingest(IngestArgs),
    /// Poem-level stratified train/validation/test split.
    Split(SplitArgs),
    /// Build the vocabulary and train skip-gram embeddings on the training split.
    TrainEmbeddings(EmbeddingArgs),
    /// Train the fused classifier and write a checkpoint.
    Train(TrainArgs),
    /// Verse- and poem-level reports on the test split.
    Evaluate(EvaluateArgs),
    /// Accuracy and coverage of thresholded voting on the test split.
    SweepThresholds(SweepArgs),
    /// Attribute verses read from a file or standard input.
    Predict(PredictArgs),
    /// Generate the synthetic desk-scale corpus.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus in JSON Lines format.
    #[arg(long)]
    corpus: PathBuf,
    /// Minimum confirmed verses per poet.
    #[arg(long)]
    min_verses: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    /// Ingest output directory or corpus file.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Train, validation and test fractions, e.g. 0.8,0.1,0.1.
    #[arg(long)]
    ratios: Option<String>,
    /// Output directory; defaults to the corpus directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbeddingArgs {
    #[command(flatten)]
    common: Common,
    /// Working directory holding the corpus and split.
    #[arg(long)]
    workdir: PathBuf,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Minimum token frequency for the vocabulary.
    #[arg(long)]
    min_freq: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Input {
    Text,
    Semantic,
    Stylometric,
    Form,
    Meter,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecayArg {
    Decoupled,
    Coupled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightingArg {
    None,
    InverseFrequency,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Post,
    Pre,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PositionalArg {
    Sinusoidal,
    Learned,
    None,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    workdir: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    decay: Option<DecayArg>,
    #[arg(long, value_enum)]
    class_weighting: Option<WeightingArg>,
    /// Inputs to leave out of the fused vector (repeatable).
    #[arg(long = "without", value_enum)]
    without: Vec<Input>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long, value_enum)]
    norm_order: Option<NormArg>,
    #[arg(long, value_enum)]
    positional: Option<PositionalArg>,
    /// Hidden units in the classification head.
    #[arg(long)]
    hidden: Option<usize>,
    /// Dropout in the classification head.
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConfidenceArg {
    Mean,
    Sum,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    workdir: PathBuf,
    /// Abstention threshold for the thresholded report.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    confidence: Option<ConfidenceArg>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    workdir: PathBuf,
    /// Ascending thresholds, e.g. 0.5,0.6,0.7,0.8,0.9.
    #[arg(long)]
    taus: Option<String>,
    #[arg(long, value_enum)]
    confidence: Option<ConfidenceArg>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    workdir: PathBuf,
    /// Verse file; `-` or absent reads standard input. Lines hold
    /// `hemistich<TAB>hemistich`, blank lines separate poems. Files ending in
    /// `.jsonl` are read as corpus records.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Form of plain-text input poems.
    #[arg(long, default_value = "unknown")]
    form: String,
    /// Meter of plain-text input poems.
    #[arg(long, default_value = "unknown")]
    meter: String,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    confidence: Option<ConfidenceArg>,
    /// Directory for the prediction CSVs; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SyntheticArgs {
    /// Output corpus file (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    poets: Option<usize>,
    #[arg(long)]
    poems_per_poet: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of verses that carry no vocabulary signal.
    #[arg(long)]
    generic_fraction: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Split(a) => commands::split(a),
        Command::TrainEmbeddings(a) => commands::train_embeddings(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::SweepThresholds(a) => commands::sweep(a),
        Command::Predict(a) => commands::predict(a),
        Command::MakeSynthetic(a) => commands::make_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
