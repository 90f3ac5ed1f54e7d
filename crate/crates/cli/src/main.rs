mod commands;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use uqforge_core::binning::BinMode;
use uqforge_core::records::StreamMask;
use uqforge_core::scorer::{Optimizer, Variant};
use uqforge_core::synth::Regime;

#[derive(Debug, Parser)]
#[command(
    name = "uqforge",
    version,
    about = "Uncertainty scoring for retrieval-augmented VQA outputs"
)]
pub struct Cli {
    /// Worker threads for data-parallel steps (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset.
    Synth(SynthArgs),
    /// BM25 retrieval over a sectioned corpus, with Recall@k when gold is given.
    Retrieve(RetrieveArgs),
    /// Fit probability bins on a dataset.
    FitBins(FitBinsArgs),
    /// Train a learned scorer.
    Train(TrainArgs),
    /// Score records with baselines and trained models.
    Score(ScoreArgs),
    /// AUROC report with DeLong tests from score files.
    Eval(EvalArgs),
    /// Train on each dataset tag and evaluate across tags.
    Matrix(MatrixArgs),
    /// Render saved evaluation reports as one text table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Logistic noise scale on every probability.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub correct_rate: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Corpus JSONL with doc_id, section_id and text.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Query JSONL with id, query and optional gold {doc_id, section_id}.
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
    #[arg(long, default_value_t = 0.9)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.4)]
    pub b: f64,
    /// Match gold on sections instead of whole documents.
    #[arg(long)]
    pub section_level: bool,
}

#[derive(Debug, Args)]
pub struct FitBinsArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = uqforge_core::binning::DEFAULT_BINS)]
    pub k: usize,
    #[arg(long, default_value = "quantile")]
    pub bin_mode: BinMode,
    /// One set of boundaries for all streams.
    #[arg(long)]
    pub shared_bins: bool,
}

/// Training settings shared by `train` and `matrix`. Unset flags fall back
/// to the `--config` file, then to the built-in defaults.
#[derive(Debug, Clone, Args)]
pub struct TrainOpts {
    /// JSON file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub bin_mode: Option<BinMode>,
    #[arg(long)]
    pub shared_bins: bool,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub optimizer: Option<Optimizer>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// Validation records; when absent a slice of the input is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Record field whose value keeps records together when holding out validation data.
    #[arg(long)]
    pub group_key: Option<String>,
    /// Previously fitted bins; fitted on the training records otherwise.
    #[arg(long)]
    pub bins: Option<PathBuf>,
    /// Streams fed to the scorer: "all" or a comma list of stream names.
    #[arg(long, default_value = "all")]
    pub mask: StreamMask,
    /// Method name used in score files.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrientationArg {
    Positive,
    Negative,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Trained model checkpoints.
    #[arg(long = "model")]
    pub models: Vec<PathBuf>,
    /// Comma-separated baseline methods.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Raw (not length-normalized) sample log-probabilities for predictive entropy.
    #[arg(long)]
    pub pe_raw: bool,
    #[arg(long, value_enum, default_value = "positive")]
    pub imgper_orientation: OrientationArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled records.
    #[arg(short, long, visible_alias = "labels")]
    pub input: PathBuf,
    /// Score CSV files.
    #[arg(long = "scores")]
    pub scores: Vec<PathBuf>,
    /// Methods to include; all methods in the score files by default.
    /// Baselines missing from the score files are computed on the input.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long)]
    pub reference: String,
    #[arg(long)]
    pub secondary_reference: Option<String>,
    /// Report JSON; CSV, pairwise CSV and text table are written next to it.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    /// NAME=TRAIN.jsonl:TEST.jsonl, NAME being dataset/retriever/model.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<String>,
    #[arg(long)]
    pub skip_diagonal: bool,
    #[arg(long, value_delimiter = ',', default_value = "confidence")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Record field whose value keeps records together when holding out validation data.
    #[arg(long)]
    pub group_key: Option<String>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// LABEL=report.json, one per table column.
    #[arg(long = "column", required = true)]
    pub columns: Vec<String>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UQFORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = errors::classify(&err);
            eprintln!("{}", errors::error_line(kind, code, &err));
            ExitCode::from(code)
        }
    }
}
