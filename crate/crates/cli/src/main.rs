mod assign;
mod bench;
mod error;
mod eval;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use actassign::powerset::DEFAULT_POWERSET_CAP;
use actassign::solver::DEFAULT_SOLVER_CAP;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "actassign",
    version,
    about = "Weakly supervised actor-action association"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assign action subsets to the actors of every frame in a clip file.
    Assign(AssignArgs),
    /// Dump per-actor subset score tables for one clip.
    Score(ScoreArgs),
    /// Evaluate frame-level detections against ground truth (per-class AP and mAP).
    Eval(EvalArgs),
    /// Generate a synthetic benchmark dataset.
    Synth(SynthArgs),
    /// Train the toy model on the synthetic benchmark and write a metric trace.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
pub struct Caps {
    /// Largest clip label set scored by enumeration.
    #[arg(long, default_value_t = DEFAULT_POWERSET_CAP)]
    pub powerset_cap: usize,
    /// Largest clip label set handed to the exact solver.
    #[arg(long, default_value_t = DEFAULT_SOLVER_CAP)]
    pub solver_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args, Debug)]
pub struct AssignArgs {
    /// Clip file (JSON).
    pub input: PathBuf,
    /// Output path; stdout when omitted or `-`.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
    /// Per-class thresholding instead of the constrained solver.
    #[arg(long)]
    pub no_lp: bool,
    /// Drop infeasible frames with a warning instead of failing.
    #[arg(long)]
    pub skip_infeasible: bool,
    /// Reject unknown fields in the clip file.
    #[arg(long)]
    pub strict: bool,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[command(flatten)]
    pub caps: Caps,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    pub input: PathBuf,
    /// Clip to dump; may be omitted when the file holds a single clip.
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value_t = DEFAULT_POWERSET_CAP)]
    pub powerset_cap: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction CSV: video_id,timestamp,x1,y1,x2,y2,class_id,score.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth CSV: video_id,timestamp,x1,y1,x2,y2,class_id[,person_id].
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = actassign::evalmap::DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
    /// Machine-readable report.
    #[arg(long)]
    pub json: bool,
    /// Class table for the ground truth, one name per line.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Class table the predictions were produced with; must equal `--classes`.
    #[arg(long)]
    pub pred_classes: Option<PathBuf>,
    /// Number of classes when no class table is given.
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Run configuration (JSON with optional `data` and `schedule` sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "proposed")]
    pub method: actassign::synthbench::Method,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the association loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub powerset_cap: Option<usize>,
    #[arg(long)]
    pub solver_cap: Option<usize>,
    /// Where to write the metric trace (JSON).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Assign(a) => assign::run_assign(&a),
        Command::Score(a) => assign::run_score(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Synth(a) => bench::run_synth(&a),
        Command::Train(a) => bench::run_train(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let head: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let err = CliError::usage(head.join(" ").trim_start_matches("error: "));
            eprintln!("{err}");
            return err.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            err.exit_code()
        }
    }
}
