//! `drmea`: generate synthetic domain pairs, train and evaluate adaptation
//! runs, study the subspace dimension, and render run reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "drmea",
    version,
    about = "Discriminative manifold embedding and alignment for domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a rotated-Gaussian source/target pair.
    GenData(GenDataArgs),
    /// Train a network on a source/target pair.
    Train(TrainArgs),
    /// Evaluate a saved model on labelled features.
    Eval(EvalArgs),
    /// Average the error index over random batches and recommend d'.
    AnalyzeDprime(AnalyzeArgs),
    /// Render loss and accuracy curves of a run directory.
    Report(ReportArgs),
}

#[derive(clap::Args, Debug)]
struct GenDataArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Source samples per class.
    #[arg(long, default_value_t = 500)]
    n_source: usize,
    /// Target samples per class.
    #[arg(long, default_value_t = 500)]
    n_target: usize,
    /// Target rotation in degrees, applied in the first two coordinates.
    #[arg(long, default_value_t = 45.0, allow_negative_numbers = true)]
    rotation: f64,
    /// Target translation, comma-separated and zero-padded to --dim.
    #[arg(long, default_value = "0.5", allow_negative_numbers = true)]
    shift: String,
    /// Standard deviation of the isotropic class noise.
    #[arg(long, default_value_t = 0.8)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Config file of `key = value` lines [default: none, built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory laid out by gen-data [default: none]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Labelled source CSV, instead of --data [default: none]
    #[arg(long, conflicts_with = "data")]
    source: Option<PathBuf>,
    /// Unlabelled target CSV, instead of --data [default: none]
    #[arg(long, conflicts_with = "data")]
    target: Option<PathBuf>,
    /// Held-out target labels, used only for logging accuracy [default: none]
    #[arg(long, conflicts_with = "data")]
    target_labels: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Loss terms to switch off.
    #[arg(long, default_value = "none", value_parser = ["none", "no-ds", "no-al", "source-only"])]
    ablation: String,
    /// Extra `key=value` config overrides, applied after --config [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    /// Model file written by train.
    #[arg(long, default_value = "run/model_final")]
    model: PathBuf,
    /// Feature CSV.
    #[arg(long, default_value = "data/target.csv")]
    features: PathBuf,
    /// Separate label file; without it the last CSV column holds labels.
    #[arg(long, default_value = "data/target_labels.csv")]
    labels: PathBuf,
    /// Read labels from the last CSV column instead of --labels.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    inline_labels: bool,
}

#[derive(clap::Args, Debug)]
struct AnalyzeArgs {
    /// Source feature CSV.
    #[arg(long, default_value = "data/source.csv")]
    source: PathBuf,
    /// Target feature CSV.
    #[arg(long, default_value = "data/target.csv")]
    target: PathBuf,
    /// Whether the source CSV has a trailing label column.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    source_labelled: bool,
    /// Whether the target CSV has a trailing label column.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    target_labelled: bool,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    /// Random batch pairs averaged per d'.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Confidence parameter of the reported bound.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "dprime")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    /// Run directory containing epochs.csv.
    #[arg(long, default_value = "run")]
    run: PathBuf,
    /// Output directory [default: the run directory]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::AnalyzeDprime(a) => commands::analyze_dprime(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
