use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use boxclean::active::Selection;
use boxclean::correction::BibMode;
use boxclean::lsm::LsmMode;
use boxclean::ErrorKind;

mod commands;
mod config;

/// Active cleaning of noisy crowdsourced bounding boxes.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inject crowd noise into a ground-truth COCO file (or a generated corpus).
    SimulateNoise(SimulateNoiseArgs),
    /// Active loop plus correction; closed loop against the truth, or hand off to review.
    RunPipeline(RunPipelineArgs),
    /// AP50, TIDE and label quality of a COCO file against the truth.
    Evaluate(EvaluateArgs),
    /// Serve the review queue of a workdir over HTTP.
    ServeReview(ServeReviewArgs),
    /// Apply the review decisions of a workdir and write the cleaned set and report.
    ExportReport(ExportReportArgs),
}

#[derive(Debug, Args)]
struct SimulateNoiseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth COCO file to corrupt.
    #[arg(long, conflicts_with = "generate")]
    truth: Option<PathBuf>,
    /// Generate a synthetic corpus with this many images instead.
    #[arg(long)]
    generate: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// `paper-like` or `none`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    bkg: Option<f64>,
    #[arg(long)]
    miss: Option<f64>,
    #[arg(long)]
    loc: Option<f64>,
    #[arg(long)]
    bib: Option<f64>,
    #[arg(long)]
    loc_sigma: Option<f64>,
}

#[derive(Debug, Args)]
struct RunPipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    crowd: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    expert: Option<PathBuf>,
    #[arg(long)]
    difficulty: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    x0: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long = "iou-thr")]
    iou_thr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// `dual` or `single`.
    #[arg(long)]
    mode: Option<LsmMode>,
    /// `active` or `random`.
    #[arg(long, conflicts_with = "random")]
    selection: Option<Selection>,
    /// Shorthand for `--selection random`.
    #[arg(long)]
    random: bool,
    /// `formula` or `prose`.
    #[arg(long)]
    bib_mode: Option<BibMode>,
    /// `sim` or `external:<command>`.
    #[arg(long)]
    detector: Option<String>,
    /// Stop after correction and leave the queue for serve-review.
    #[arg(long, conflicts_with = "compare")]
    interactive: bool,
    /// Also run random selection and single-model variants and write paired reports.
    #[arg(long)]
    compare: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Treat the candidate as labels (confidence 1) and report label quality too.
    #[arg(long)]
    labels: bool,
    /// Name recorded in the report.
    #[arg(long, default_value = "candidate")]
    method: String,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeReviewArgs {
    #[arg(long)]
    workdir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Image directory; defaults to the one recorded by run-pipeline.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Built review UI to serve at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
    /// Require this bearer token on `/api`.
    #[arg(long, env = "BOXCLEAN_TOKEN")]
    token: Option<String>,
}

#[derive(Debug, Args)]
struct ExportReportArgs {
    #[arg(long)]
    workdir: PathBuf,
    /// Ground truth for evaluation; defaults to the one recorded by run-pipeline.
    #[arg(long)]
    truth: Option<PathBuf>,
}

/// Exit code of the first recognised error family in the chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<boxclean::Error>() {
            return match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Io => 3,
                ErrorKind::Schema => 4,
                ErrorKind::State => 5,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if cause.is::<serde_json::Error>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SimulateNoise(a) => commands::simulate_noise(a),
        Command::RunPipeline(a) => commands::run_pipeline(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::ServeReview(a) => commands::serve_review(a),
        Command::ExportReport(a) => commands::export_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
