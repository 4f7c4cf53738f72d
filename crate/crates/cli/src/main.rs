//! `ffb`: fairness evaluation and bias-aware pruning for forgery detectors.
//!
//! Exit codes: 0 success, 2 data or validation error, 64 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ffb", version, about = "Fairness metrics and bias-aware pruning for forgery detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute the fairness report for a JSONL prediction log.
    Eval(EvalArgs),
    /// Search the accuracy-maximizing threshold for each race.
    Threshold(ThresholdArgs),
    /// Prune a model and write the pruned model plus its mask.
    Prune(PruneArgs),
    /// Evaluate a grid of pruning methods and rates.
    Sweep(SweepArgs),
    /// Generate a synthetic prediction log from a spec file.
    Synth(SynthArgs),
    /// Merge report bundles and render them.
    Render(RenderArgs),
    /// Write a random toy model with calibration and evaluation sets.
    Toy(ToyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Markdown,
    Csv,
}

impl From<Format> for ffb_core::report::ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => Self::Json,
            Format::Markdown => Self::Markdown,
            Format::Csv => Self::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Bpfa,
    Weig,
    Roba,
}

impl From<Method> for ffb_core::pruning::PruneMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Bpfa => Self::Bpfa,
            Method::Weig => Self::Weig,
            Method::Roba => Self::Roba,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Tap {
    Pre,
    Post,
}

#[derive(Debug, Args)]
struct ThresholdSource {
    /// Global decision threshold (default 0.5).
    #[arg(long, value_parser = unit_interval, conflicts_with = "thresholds")]
    threshold: Option<f64>,
    /// Per-race threshold plan: a JSON object {race: threshold}.
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Prediction log (JSONL).
    records: PathBuf,
    #[command(flatten)]
    source: ThresholdSource,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Drop races with an empty cell from that approach's terms instead of failing.
    #[arg(long)]
    skip_missing: bool,
    /// Run name in the report (defaults to the file stem).
    #[arg(long)]
    name: Option<String>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    records: PathBuf,
    /// Where to write the plan (stdout if omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also write per-race score histograms as JSON.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Debug, Args)]
struct PruneConfigArgs {
    /// Prune only conv2d layers.
    #[arg(long)]
    conv_only: bool,
    /// Where activations are tapped for the bias estimate.
    #[arg(long, value_enum, default_value = "pre")]
    tap: Tap,
}

#[derive(Debug, Args)]
struct PruneArgs {
    /// Input model (FTM).
    model: PathBuf,
    /// Calibration directory (or manifest.jsonl); required for bpfa and roba.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, value_parser = rate)]
    rate: f64,
    #[arg(long, short)]
    out: PathBuf,
    /// Mask sidecar path (defaults to <out>.mask).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    config: PruneConfigArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    model: PathBuf,
    /// Evaluation directory (or manifest.jsonl) with labels and approaches.
    #[arg(long = "eval")]
    eval_set: PathBuf,
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Comma-separated methods.
    #[arg(long, value_enum, value_delimiter = ',', num_args = 0.., default_value = "bpfa,weig,roba")]
    methods: Vec<Method>,
    /// Comma-separated pruning rates in [0, 1).
    #[arg(long, value_parser = rate, value_delimiter = ',', num_args = 1..)]
    rates: Option<Vec<f64>>,
    #[command(flatten)]
    source: ThresholdSource,
    #[arg(long)]
    skip_missing: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: PruneConfigArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Spec file (JSON).
    #[arg(required_unless_present = "bundled", conflicts_with = "bundled")]
    spec: Option<PathBuf>,
    /// Use a spec shipped with the tool: table6, table6_best, bias_offset, aggregation_distortion.
    #[arg(long)]
    bundled: Option<String>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Report bundles (JSON) produced by `eval --format json`.
    #[arg(required = true)]
    bundles: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: Format,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// Output directory; receives model.ftm, calib/, eval/ and plan.json.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "Caucasian,Asian,African,Indian", value_delimiter = ',')]
    races: Vec<String>,
    #[arg(long, default_value = "FaceSwap", value_delimiter = ',')]
    approaches: Vec<String>,
    #[arg(long, default_value_t = 8)]
    calib_per_race: usize,
    #[arg(long, default_value_t = 16)]
    eval_per_cell: usize,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("rate {v} is outside [0, 1)"))
    }
}

const EXIT_DATA: u8 = 2;
const EXIT_USAGE: u8 = 64;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    if let Ok(text) = std::env::var("FFB_THREADS") {
        match text.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: FFB_THREADS must be a positive integer, got `{text}`");
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
    }
}
