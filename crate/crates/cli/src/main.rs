//! `mhex`: generate synthetic data, train MHEX hosts, and explain, evaluate
//! and analyse trained checkpoints.

mod commands;
mod data;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "mhex",
    version,
    about = "Multi-head explainer runs on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to disk.
    Generate(GenerateArgs),
    /// Train a host with MHEX sites and save a checkpoint.
    Train(TrainArgs),
    /// Write saliency maps for selected samples.
    Explain(ExplainArgs),
    /// Score saliency maps with the drop, area and curve metrics.
    Evaluate(EvaluateArgs),
    /// Gradient-collaboration correlations, block-wise maps and the ReLU entropy check.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Shapes,
    Tokens,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Shapes => "shapes",
            DatasetKind::Tokens => "tokens",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SiteLayout {
    /// Downsampling residual connections plus the last block.
    Downsampling,
    /// Every residual block.
    Every,
}

/// Flags every command shares.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Output directory; the MHEX_OUT environment variable takes precedence.
    #[arg(long, default_value = "mhex-out")]
    pub out: PathBuf,
    /// Key-value config to read unset flags from, e.g. a previous run's config.txt.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample work (0 = one per core).
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Which synthetic samples to use.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed of the data generator; defaults to the training seed 7 for
    /// `train` and `generate`, and to the held-out seed 1000003 otherwise.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Vocabulary size for token data.
    #[arg(long)]
    pub vocab: Option<usize>,
}

/// Saliency settings.
#[derive(Args, Debug, Clone)]
pub struct SaliencyArgs {
    /// Scale on negative weights, in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Salience-sharpness keep threshold, in [0, 1]; defaults to 1/n_class + 0.2.
    #[arg(long)]
    pub ss: Option<f64>,
    /// Per-layer decay in (0, 1].
    #[arg(long)]
    pub decay: Option<f64>,
    /// Number of shallowest sites read by token saliency.
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Loss mode: pretrain sums the logits of all heads, finetune sums their losses.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// MHEX site placement on the CNN host.
    #[arg(long, value_enum)]
    pub sites: Option<SiteLayout>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub saliency: SaliencyArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated sample ids.
    #[arg(long)]
    pub samples: Option<String>,
    /// Class to explain; defaults to each sample's label.
    #[arg(long)]
    pub class: Option<usize>,
    /// Also write Grad-CAM maps.
    #[arg(long)]
    pub grad_cam: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub saliency: SaliencyArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Steps of the insertion and deletion curves.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Fraction of tokens masked in token mode.
    #[arg(long)]
    pub top_frac: Option<f64>,
    /// Also score the ground-truth mask as an explainer.
    #[arg(long)]
    pub oracle: bool,
    /// Record every saliency area as 0.25 (testing aid).
    #[arg(long, hide = true)]
    pub force_area_quarter: bool,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub saliency: SaliencyArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Cells per side of the block-wise quality maps.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Site whose block-wise quality is mapped.
    #[arg(long)]
    pub site: Option<usize>,
    /// Samples drawn for the ReLU entropy estimate.
    #[arg(long)]
    pub entropy_samples: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Explain(a) => commands::explain::run(a),
        Command::Evaluate(a) => commands::evaluate::run(a),
        Command::Analyze(a) => commands::analyze::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
