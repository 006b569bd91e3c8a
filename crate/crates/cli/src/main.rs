//! `fnet`: ingest, preprocess, synthesize, train, predict, score and explain.
//!
//! Exit codes: 0 on success, 1 on a validation error (bad arguments, paths or
//! inputs), 2 on a runtime failure. Every successful run writes
//! `manifest.json` into its output directory.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Validation { component: &'static str, message: String },
    Runtime { component: &'static str, message: String },
}

impl CliError {
    pub fn validation(component: &'static str, message: impl Into<String>) -> Self {
        Self::Validation {
            component,
            message: message.into(),
        }
    }

    pub fn runtime(component: &'static str, message: impl Into<String>) -> Self {
        Self::Runtime {
            component,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Validation { .. } => 1,
            Self::Runtime { .. } => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Validation { component, message } => write!(f, "{component}: invalid input: {message}"),
            Self::Runtime { component, message } => write!(f, "{component}: failed: {message}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fnet", version, about = "FVC decline prediction from chest CT")]
pub struct Cli {
    /// Worker threads for parallel sections; 1 forces sequential execution.
    #[arg(long, global = true, env = "FNET_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset directory and summarize it.
    Ingest(IngestArgs),
    /// Write the preprocessed model inputs of every patient as images.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic cohort.
    Synth(SynthArgs),
    /// Train a model bundle.
    Train(TrainArgs),
    /// Predict FVC and confidence for every patient.
    Predict(PredictArgs),
    /// Score predictions with the modified Laplace Log Likelihood.
    Score(ScoreArgs),
    /// Occlusion attribution overlay for one patient slice.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, env = "FNET_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "FNET_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long, env = "FNET_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "FNET_OUT")]
    pub out: PathBuf,
    /// JSON preprocessing config.
    #[arg(long, env = "FNET_PREPROCESS_CONFIG")]
    pub preprocess_config: Option<PathBuf>,
    /// Square model input size in pixels.
    #[arg(long, env = "FNET_IMAGE_SIZE")]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = "FNET_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "FNET_N_PATIENTS")]
    pub n_patients: Option<usize>,
    /// Slices per volume (default 10).
    #[arg(long)]
    pub slices: Option<usize>,
    /// Rows per slice (default 64).
    #[arg(long)]
    pub rows: Option<usize>,
    /// Columns per slice (default 64).
    #[arg(long)]
    pub cols: Option<usize>,
    /// Standard deviation of FVC visit noise in ml.
    #[arg(long)]
    pub fvc_noise: Option<f64>,
    /// Full JSON synth config; flags override it.
    #[arg(long, env = "FNET_SYNTH_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "FNET_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "FNET_DATA")]
    pub data: PathBuf,
    /// Model bundle directory.
    #[arg(long, env = "FNET_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "FNET_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "FNET_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, env = "FNET_IMAGE_SIZE")]
    pub image_size: Option<usize>,
    #[arg(long, env = "FNET_CNN_WEIGHT")]
    pub cnn_weight: Option<f64>,
    #[arg(long, env = "FNET_PREPROCESS_CONFIG")]
    pub preprocess_config: Option<PathBuf>,
    #[arg(long, env = "FNET_BACKBONE_CONFIG")]
    pub backbone_config: Option<PathBuf>,
    #[arg(long, env = "FNET_ENSEMBLE_CONFIG")]
    pub ensemble_config: Option<PathBuf>,
    #[arg(long, env = "FNET_TRAIN_CONFIG")]
    pub train_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, env = "FNET_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "FNET_MODEL")]
    pub model: PathBuf,
    #[arg(long, env = "FNET_OUT")]
    pub out: PathBuf,
    /// Target weeks for every patient; defaults to each patient's recorded
    /// follow-up weeks.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub weeks: Option<Vec<i32>>,
    #[arg(long, env = "FNET_ENSEMBLE_CONFIG")]
    pub ensemble_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Prediction CSV (`Patient_Week,FVC,Confidence`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth: `Patient_Week,FVC` rows or a metadata CSV.
    #[arg(long)]
    pub truth: PathBuf,
    /// Score only the last N follow-up visits of each patient.
    #[arg(long)]
    pub last_n: Option<usize>,
    #[arg(long, default_value = "fnet")]
    pub method: String,
    #[arg(long, env = "FNET_OUT", default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, env = "FNET_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "FNET_MODEL")]
    pub model: PathBuf,
    #[arg(long)]
    pub patient: String,
    /// Index into the selected lower slices; defaults to the middle one.
    #[arg(long)]
    pub slice: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.0)]
    pub baseline: f32,
    /// `pgm` or `png`.
    #[arg(long, default_value = "pgm")]
    pub format: String,
    #[arg(long, env = "FNET_OUT")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FNET_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("cli: invalid input: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cli: failed: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
