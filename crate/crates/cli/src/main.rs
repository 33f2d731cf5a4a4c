//! `homey`: train, evaluate and run the heuristic-mask detector.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Ablation;

#[derive(Parser, Debug)]
#[command(name = "homey", version, about = "Heuristic object masking detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Detect objects in one image.
    Detect(DetectArgs),
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Finite-difference check of every loss gradient on a miniature model.
    Gradcheck(GradcheckArgs),
    /// Compare two run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with images/, labels/ and classes.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Class table; defaults to DATA/classes.json.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Validation dataset; without it the tail of --data is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Held-out fraction used when --val is absent.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    /// Continue an interrupted run from OUT/last.ckpt.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this epoch, leaving a resumable run.
    #[arg(long, value_name = "EPOCH")]
    pub stop_after: Option<usize>,
    /// Overwrite a completed run.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub conf_floor: Option<f64>,
    #[arg(long)]
    pub iou_floor: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON Lines output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = homey_core::postprocess::DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub skew: Option<f64>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Baseline run directory followed by the run compared against it.
    #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
    pub compare: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
