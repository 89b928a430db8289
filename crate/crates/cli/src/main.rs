//! `ardvae`: train, evaluate and inspect VAEs with relevance determination on
//! the latent space.
//!
//! Exit status is 0 on success, 2 for usage and validation errors (bad
//! flags, invalid configs, unreadable or mismatched inputs) and 1 for failures
//! during a run.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use ardvae_core::data::{DataFormat, Nonlinearity};
use ardvae_core::models::Variant;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ardvae", version, about = "Deep generative models with automatic relevance determination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a config file or a built-in preset.
    Train(TrainArgs),
    /// Average the bound of a checkpoint over repeated stochastic evaluations.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a toy model.
    Gradcheck(GradcheckArgs),
    /// Print and save the relevance table of a checkpoint.
    Report(ReportArgs),
    /// Generate a synthetic dataset with known latent dimensionality.
    Synth(SynthArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum FormatArg {
    Csv,
    FlatF32,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => DataFormat::Csv,
            FormatArg::FlatF32 => DataFormat::FlatF32,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum VariantArg {
    Sgvb,
    SgvbArd,
    GsgvbArd,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Sgvb => Variant::Sgvb,
            VariantArg::SgvbArd => Variant::SgvbArd,
            VariantArg::GsgvbArd => Variant::GsgvbArd,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON config file.
    #[arg(long, conflicts_with_all = ["preset", "resume"])]
    pub config: Option<PathBuf>,
    /// Built-in preset such as `frey_200h_50z_ard`.
    #[arg(long, conflicts_with = "resume")]
    pub preset: Option<String>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Dataset file; overrides `data_path` from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured iteration count.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long, env = "ARDVAE_OUT_DIR", default_value = "runs")]
    pub out_dir: PathBuf,
    /// Single-threaded fixed-order reductions (`--deterministic false` to allow threads).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    /// Validate and print the resolved config, then exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Number of stochastic evaluations to average.
    #[arg(long, default_value_t = 100)]
    pub window: usize,
    /// Derive evaluation noise from this seed instead of the checkpoint's RNG.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "sgvb")]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 6)]
    pub input: usize,
    /// Comma-separated hidden layer sizes.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub latent: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub n_w: usize,
    #[arg(long, default_value_t = 1)]
    pub n_z: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Perturb the analytic gradient before checking (harness self-test).
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `ard_mass` or `weight_norm`; defaults to the training config's rule.
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Directory for `relevance.txt` and `weight_norms.csv`; defaults to the checkpoint directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also dump reconstructions of `--data` row `--index` as `HxW` PGM images.
    #[arg(long, requires = "data")]
    pub image_shape: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum NonlinearityArg {
    Linear,
    TanhMlp,
}

impl From<NonlinearityArg> for Nonlinearity {
    fn from(n: NonlinearityArg) -> Self {
        match n {
            NonlinearityArg::Linear => Nonlinearity::Linear,
            NonlinearityArg::TanhMlp => Nonlinearity::TanhMlp,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Intrinsic (ground-truth) latent dimension.
    #[arg(long)]
    pub k: usize,
    /// Ambient data dimension.
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, value_enum, default_value = "linear")]
    pub nonlinearity: NonlinearityArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output `.f32` file; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Report(a) => commands::report(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
