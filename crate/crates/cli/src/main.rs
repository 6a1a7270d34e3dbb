//! `attentropy` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration
//! error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] attentropy::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_config() => 2,
            _ => 1,
        }
    }
}

macro_rules! core_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

core_from!(
    attentropy::npy::NpyError,
    attentropy::pgm::PgmError,
    attentropy::tensor::TensorError,
    attentropy::vit::VitError,
    attentropy::entropy::EntropyError,
    attentropy::selection::SelectionError,
    attentropy::eval::EvalError,
    attentropy::viz::VizError
);

#[derive(Debug, Parser)]
#[command(name = "attentropy", version, about = "Attention-entropy object detection toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random draw (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Pipeline config JSON supplying defaults for unset flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory, or output file for JSON-producing commands.
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create toy ViT weights.
    InitModel(InitModelArgs),
    /// Render the layer-selection test pattern and its object mask.
    GenTestpattern(GenTestpatternArgs),
    /// Per-layer entropy maps (and optional attention dumps) for one image.
    Extract(ExtractArgs),
    /// Pick layers whose test-pattern entropy separates object and background.
    SelectLayers(SelectLayersArgs),
    /// Fit per-layer logistic weights on labelled frames.
    FitWeights(FitWeightsArgs),
    /// Score map and binary mask for one image.
    Segment(SegmentArgs),
    /// Pixel- and segment-level metrics for a directory of score maps.
    Evaluate(EvaluateArgs),
    /// Write a bundle for the browser attention explorer.
    ExportViz(ExportVizArgs),
    /// Check a viz bundle.
    ValidateViz(ValidateVizArgs),
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub heads: usize,
    #[arg(long)]
    pub channels: usize,
    /// Patches per side.
    #[arg(long)]
    pub grid: usize,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    /// Prepend a class token.
    #[arg(long)]
    pub class_token: bool,
    /// Zero the query and key projections (uniform attention).
    #[arg(long)]
    pub zero_qk: bool,
}

#[derive(Debug, Args)]
pub struct GenTestpatternArgs {
    /// Take size and patch from this model instead of the flags.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    /// Circle radius in pixels.
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Sliding-window stride in pixels (default: half the model input).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Keep class-token mass out of patch rows without rescaling them.
    #[arg(long)]
    pub no_renormalize: bool,
    /// Also write per-window attention tensors.
    #[arg(long)]
    pub dump_attention: bool,
}

#[derive(Debug, Args)]
pub struct SelectLayersArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = attentropy::selection::DEFAULT_RATIO)]
    pub ratio: f64,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub no_renormalize: bool,
}

#[derive(Debug, Args)]
pub struct FitWeightsArgs {
    /// Extraction directory; repeat once per frame.
    #[arg(long = "entropy-dir")]
    pub entropy_dirs: Vec<PathBuf>,
    /// Ground-truth mask PGM; one per --entropy-dir, same order.
    #[arg(long = "mask")]
    pub masks: Vec<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use an existing extraction instead of running the model.
    #[arg(long, conflicts_with_all = ["image", "model"])]
    pub entropy_dir: Option<PathBuf>,
    /// Comma-separated layer subset, e.g. `1,2,5`.
    #[arg(long, conflicts_with = "aggregation")]
    pub layers: Option<String>,
    /// Selection report, fitted weights or aggregation JSON.
    #[arg(long)]
    pub aggregation: Option<PathBuf>,
    /// Pixels with score >= threshold are marked as object.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Common grid for layer averaging, `WxH` (default: finest layer grid).
    #[arg(long, value_parser = config::parse_grid)]
    pub common: Option<(usize, usize)>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub no_renormalize: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Normalization {
    None,
    MinMax,
    Rank,
}

impl From<Normalization> for attentropy::ScoreNormalization {
    fn from(n: Normalization) -> Self {
        match n {
            Normalization::None => Self::None,
            Normalization::MinMax => Self::MinMax,
            Normalization::Rank => Self::Rank,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `<stem>.npy` score maps.
    #[arg(long)]
    pub scores: PathBuf,
    /// Directory of `<stem>.pgm` ground-truth masks.
    #[arg(long)]
    pub gt: PathBuf,
    /// Append a one-line CSV summary to this file (header written if new).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Score mapping applied before segment thresholds.
    #[arg(long, value_enum, default_value_t = Normalization::MinMax)]
    pub normalization: Normalization,
    /// Comma-separated segment thresholds (default 0.25..0.75 step 0.05).
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, default_value_t = attentropy::eval::DEFAULT_MATCH_THRESHOLD)]
    pub match_threshold: f64,
    #[arg(long, default_value_t = attentropy::eval::DEFAULT_TPR_TARGET)]
    pub tpr_target: f64,
}

#[derive(Debug, Args)]
pub struct ExportVizArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Extraction directory written with --dump-attention.
    #[arg(long)]
    pub attention: PathBuf,
    /// Which sliding window's attention to export.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct ValidateVizArgs {
    pub bundle: PathBuf,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("ATTENTROPY_LOG", "warn");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let config = match &cli.global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let ctx = commands::Context {
        seed: cli.global.seed.or(config.seed).unwrap_or(0),
        out: cli.global.out,
        config,
    };
    match cli.command {
        Command::InitModel(a) => commands::init_model(&ctx, a),
        Command::GenTestpattern(a) => commands::gen_testpattern(&ctx, a),
        Command::Extract(a) => commands::extract(&ctx, a),
        Command::SelectLayers(a) => commands::select_layers(&ctx, a),
        Command::FitWeights(a) => commands::fit_weights(&ctx, a),
        Command::Segment(a) => commands::segment(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::ExportViz(a) => commands::export_viz(&ctx, a),
        Command::ValidateViz(a) => commands::validate_viz(&ctx, a),
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
