mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use collossl::{Error, ErrorCategory};

/// Output root used when neither `--output` nor `output_dir` is given.
pub const OUTPUT_ROOT_ENV: &str = "COLLOSSL_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "collossl", version, about = "Multi-device contrastive pretraining for activity recognition")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Seeds generation and training; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Replace the contents of an existing output directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Dataset directory in the native layout; sets `data.source = "dir"`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub anchor: Option<String>,
    #[arg(long, global = true)]
    pub label_fraction: Option<f64>,
    /// Caps pretraining and fine-tuning epochs.
    #[arg(long, global = true)]
    pub max_epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-device recording.
    SynthGen,
    /// Write a perturbed copy of a dataset.
    Inject(InjectArgs),
    /// Pairwise MMD between the anchor and every other device.
    MmdReport {
        /// Windows drawn per device.
        #[arg(long, default_value_t = 256)]
        max_windows: usize,
    },
    /// Contrastive pretraining of the feature extractor.
    Pretrain,
    /// Fine-tune a pretrained extractor on anchor labels.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one of the baselines on the whole dataset.
    Baseline {
        #[arg(long)]
        kind: String,
    },
    /// Leave-one-group-out evaluation of one method.
    Evaluate {
        #[arg(long)]
        method: Option<String>,
    },
    /// Every method at every label fraction.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Selection and sampling ablations of contrastive pretraining.
    Ablate(AblateArgs),
    /// Evaluation under a grid of perturbation levels.
    Robustness(RobustnessArgs),
    /// Write anchor or device embeddings of a trained extractor.
    ExportEmbeddings {
        /// Extractor or classifier checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Device to embed; the anchor by default.
        #[arg(long)]
        device: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PerturbationKind {
    Heterogeneity,
    Missing,
    Misalignment,
}

#[derive(Args, Debug)]
pub struct InjectArgs {
    #[arg(long, value_enum)]
    pub kind: PerturbationKind,
    /// Shift in seconds, p_u, or the heterogeneity sigma (scale and bias).
    #[arg(long)]
    pub level: f64,
    /// Devices to perturb; the default depends on the kind.
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Selection strategies to compare; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    pub strategy: Vec<String>,
    /// Negative sampling modes to compare; asynchronous when omitted.
    #[arg(long, value_delimiter = ',')]
    pub sampling: Vec<String>,
}

#[derive(Args, Debug)]
pub struct RobustnessArgs {
    #[arg(long, value_enum)]
    pub kind: PerturbationKind,
    /// Misalignment grid in seconds.
    #[arg(long, value_delimiter = ',')]
    pub shifts: Vec<f64>,
    /// Device unavailability grid.
    #[arg(long, value_delimiter = ',')]
    pub p_u: Vec<f64>,
    /// Heterogeneity grid; each sigma is used for scale and bias.
    #[arg(long, value_delimiter = ',')]
    pub sigma: Vec<f64>,
    #[arg(long)]
    pub method: Option<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn category_name(c: ErrorCategory) -> &'static str {
    match c {
        ErrorCategory::Config => "config",
        ErrorCategory::Data => "data",
        ErrorCategory::Numerical => "numerical",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "category": category_name(e.category()), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
