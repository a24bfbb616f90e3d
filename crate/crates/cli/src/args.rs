use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grcn::data::DatasetFormat;
use grcn::models::Variant;

#[derive(Debug, Parser)]
#[command(name = "grcn", version, about = "Graph revision networks for semi-supervised node classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on one random split.
    Train(TrainArgs),
    /// Repeated-trial experiments over retention ratios or label counts.
    Sweep(SweepArgs),
    /// Weight-decay × top-K grid search on one split.
    Gridsearch(GridArgs),
    /// Convert a dataset between on-disk formats.
    Convert(ConvertArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitKind {
    /// Citation protocol for cora/citeseer/pubmed, per-class otherwise.
    Auto,
    /// 20 per class train, 500 validation, 1000 test.
    Citation,
    /// 20 per class train, 30 per class validation, rest test.
    PerClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Edges,
    Labels,
    Main,
    Ablation,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: grcn::Error| e.to_string())
}

fn parse_format(s: &str) -> Result<DatasetFormat, String> {
    s.parse().map_err(|e: grcn::Error| e.to_string())
}

#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    /// Dataset name under the data directory, or a path to a dataset file.
    #[arg(long)]
    pub dataset: String,

    #[arg(long, env = "GRCN_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    /// citation-text or canonical-json; inferred when omitted.
    #[arg(long, value_parser = parse_format)]
    pub format: Option<DatasetFormat>,

    #[arg(long, value_enum, default_value_t = SplitKind::Auto)]
    pub split: SplitKind,

    /// Drop classes with fewer nodes than this before splitting.
    #[arg(long)]
    pub min_class_size: Option<usize>,

    /// Keep raw feature values instead of L1-normalising rows.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_revision: Option<f64>,
    #[arg(long)]
    pub lr_classification: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub hidden_g: Option<usize>,
    #[arg(long)]
    pub hidden_c: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Dropout of the classification module.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Dropout of the revision module.
    #[arg(long)]
    pub dropout_g: Option<f64>,
    #[arg(long)]
    pub svd_rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "grcn-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_parser = parse_variant, default_value = "grcn")]
    pub variant: Variant,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    pub experiment: Experiment,
    /// Comma-separated variants; defaults to gcn,grcn (ablation: all fixed-graph variants too).
    #[arg(long, value_parser = parse_variant, value_delimiter = ',')]
    pub variant: Vec<Variant>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    )]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15")]
    pub labels_per_class: Vec<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub retention: f64,
    /// Concurrent trials; defaults to the available cores.
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_parser = parse_variant, default_value = "grcn")]
    pub variant: Variant,
    #[arg(long, value_delimiter = ',', default_value = "1e-4,5e-4,1e-3,5e-3,1e-2,5e-2")]
    pub weight_decays: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,30,50,100,200")]
    pub topks: Vec<usize>,
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Input dataset path (file, prefix or directory), or a name under the data directory.
    #[arg(long)]
    pub dataset: String,
    #[arg(long, env = "GRCN_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long = "in", value_parser = parse_format, default_value = "citation-text")]
    pub in_format: DatasetFormat,
    #[arg(long = "out", value_parser = parse_format, default_value = "canonical-json")]
    pub out_format: DatasetFormat,
    /// Output file; defaults to `<out-dir>/<name>.json`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}
