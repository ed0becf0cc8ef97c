//! distfit: train generators against 2D mixtures, score sample dumps, and
//! tabulate batch-sampling probabilities, all from one config file.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use distfit::config::{self, ExperimentConfig};
use distfit::eval;
use distfit::experiment::{self, ExperimentError};
use distfit::fitting::{self, CollapseVerdict, COLLAPSE_TOLERANCE};
use distfit::matrix::Matrix;
use distfit::mixture;
use distfit::report::{self, format_float, Timing, REPORT_SCHEMA_VERSION};
use distfit::theory::{self, SamplingScenario};
use distfit::trainer::TrainError;

const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "distfit",
    version,
    about = "Adversarial training lab for 2D Gaussian mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train across consecutive seeds and write per-seed and aggregate artifacts.
    Train(TrainArgs),
    /// Score a samples CSV against the configured mixture.
    Eval(EvalArgs),
    /// Tabulate missing-component or dominance probabilities over batch sizes.
    SimulateSampling(SimulateArgs),
    /// Decide whether a weight reassignment can keep the mixture mean.
    CheckCollapse(CheckCollapseArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file; the built-in default is used when absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. --override train.lambda=0.5
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Base seed; trials use consecutive seeds from here.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel trial workers.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (beats config file and environment).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Samples CSV as written by train.
    #[arg(long)]
    samples: PathBuf,
    /// Snapshot iteration to score; latest in the file when absent.
    #[arg(long)]
    iter: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Component weights, comma separated; uniform over 8 when absent.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Strictly increasing batch sizes to sweep.
    #[arg(
        long = "batch-sizes",
        value_delimiter = ',',
        default_value = "8,16,32,64,128,256,512,1024"
    )]
    batch_sizes: Vec<usize>,
    /// Monte-Carlo trials per batch size.
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Component subset for the dominance event (all samples land inside).
    #[arg(long, value_delimiter = ',')]
    dominance: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckCollapseArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Candidate weight reassignment, comma separated, one per component.
    #[arg(long, value_delimiter = ',', required = true)]
    beta: Vec<f64>,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, message: message.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SimulateSampling(args) => cmd_simulate_sampling(args),
        Command::CheckCollapse(args) => cmd_check_collapse(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let parsed = match &args.config {
        Some(path) => config::load(path, &args.overrides),
        None => config::parse_with_overrides(DEFAULT_CONFIG, &args.overrides),
    };
    parsed.map_err(|e| CliError::usage(e.to_string()))
}

/// Divergence mid-training is a numerical failure; everything else about a
/// bad experiment is a config problem.
fn experiment_error(e: ExperimentError) -> CliError {
    match &e {
        ExperimentError::Trial { seed, source } => match source {
            TrainError::NonFiniteLoss { iteration } => CliError::numeric(format!(
                "seed {seed} diverged at iteration {iteration}"
            )),
            TrainError::Step { iteration, .. } => CliError::numeric(format!(
                "seed {seed} failed at iteration {iteration}: {source}"
            )),
            _ => CliError::usage(e.to_string()),
        },
        ExperimentError::Eval { .. } => CliError::numeric(e.to_string()),
        _ => CliError::usage(e.to_string()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let spec = config.mixture.to_spec().map_err(|e| CliError::usage(e.to_string()))?;
    config.train.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let out = config::resolve_output_dir(args.out.as_deref(), &config);

    let started = Instant::now();
    let trials = experiment::run_trials(
        &config.train,
        &spec,
        &config.eval,
        config.train.seed,
        config.experiment.trials,
        args.jobs,
    )
    .map_err(experiment_error)?;

    for trial in &trials {
        let dir = out.join(format!("seed-{}", trial.seed));
        let csv = report::samples_csv(&trial.run.snapshots);
        report::write_bytes_atomic(&dir.join("samples.csv"), csv.as_bytes())?;
        let run_report = report::run_report(
            &trial.run,
            &spec,
            &trial.eval,
            Timing { wall_seconds: trial.wall_seconds },
        );
        report::write_json_atomic(&dir.join("run-report.json"), &run_report)?;
        println!(
            "seed {}: modes={} kl={:.4} hq={:.3}",
            trial.seed,
            trial.eval.modes_covered,
            trial.eval.kl_to_real,
            trial.eval.high_quality_fraction
        );
    }

    let aggregate = experiment::aggregate(&trials);
    let aggregate_report = report::aggregate_report(
        &trials,
        &spec,
        &config.eval,
        aggregate.clone(),
        Timing { wall_seconds: started.elapsed().as_secs_f64() },
    );
    report::write_json_atomic(&out.join("aggregate.json"), &aggregate_report)?;
    println!(
        "aggregate over {} trials: median modes {:.1}, median kl {:.4} -> {}",
        aggregate.trials,
        aggregate.median_modes_covered,
        aggregate.median_kl_to_real,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let spec = config.mixture.to_spec().map_err(|e| CliError::usage(e.to_string()))?;
    let text = std::fs::read_to_string(&args.samples)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.samples.display())))?;
    let rows = report::parse_samples_csv(&text).map_err(CliError::usage)?;
    let target = match args.iter.or_else(|| rows.iter().map(|r| r.0).max()) {
        Some(it) => it,
        None => return Err(CliError::usage("samples CSV contains no rows")),
    };
    let points: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.0 == target).map(|r| (r.1, r.2)).collect();
    if points.is_empty() {
        return Err(CliError::usage(format!("no rows for iteration {target}")));
    }
    let mut data = Vec::with_capacity(points.len() * 2);
    for (x, y) in &points {
        data.push(*x);
        data.push(*y);
    }
    let samples = Matrix::from_vec(points.len(), 2, data);

    let started = Instant::now();
    let metrics = eval::mode_coverage(
        &samples,
        &spec,
        config.eval.quality_sigma,
        config.eval.kl_smoothing,
    )
    .map_err(|e| CliError::usage(e.to_string()))?;
    let file = report::EvalReportFile {
        schema_version: REPORT_SCHEMA_VERSION,
        mixture: spec,
        quality_sigma: config.eval.quality_sigma,
        kl_smoothing: config.eval.kl_smoothing,
        report: metrics,
        timing: Timing { wall_seconds: started.elapsed().as_secs_f64() },
    };

    let out = config::resolve_output_dir(args.out.as_deref(), &config);
    report::write_json_atomic(&out.join("eval-report.json"), &file)?;
    let payload =
        report::json_payload(&file).map_err(|e| CliError::usage(e.to_string()))?;
    let stripped = report::without_timing(&payload)
        .map_err(|e| CliError::usage(e.to_string()))?;
    print!("{}", String::from_utf8_lossy(&stripped));
    Ok(())
}

fn cmd_simulate_sampling(args: SimulateArgs) -> Result<(), CliError> {
    let weights = args.weights.unwrap_or_else(|| vec![0.125; 8]);
    let usage = |e: theory::TheoryError| CliError::usage(e.to_string());
    let entries: Vec<(String, theory::ProbabilityEstimate)> = match &args.dominance {
        None => theory::batch_size_sweep(&weights, &args.batch_sizes, args.trials, args.seed)
            .map_err(usage)?
            .into_iter()
            .map(|(b, est)| (b.to_string(), est))
            .collect(),
        Some(subset) => {
            let spec = mixture::ring_spec(weights.len(), 2.0, 0.02, Some(&weights))
                .map_err(|e| CliError::usage(e.to_string()))?;
            if args.batch_sizes.is_empty()
                || args.batch_sizes.windows(2).any(|w| w[1] <= w[0])
            {
                return Err(CliError::usage("batch sizes must be strictly increasing"));
            }
            let mut rows = Vec::with_capacity(args.batch_sizes.len());
            for (index, &b) in args.batch_sizes.iter().enumerate() {
                let scenario = SamplingScenario::new(spec.clone(), b)
                    .map_err(usage)?
                    .with_dominance(subset.clone())
                    .map_err(usage)?;
                let est = theory::mc_nonuniform_probability(
                    &scenario,
                    args.trials,
                    args.seed.wrapping_add(index as u64),
                )
                .map_err(usage)?;
                rows.push((b.to_string(), est));
            }
            rows
        }
    };

    let csv = report::sweep_csv(&entries);
    let out = config::resolve_output_dir(args.out.as_deref(), &ExperimentConfig::default());
    report::write_bytes_atomic(&out.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_check_collapse(args: CheckCollapseArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let spec = config.mixture.to_spec().map_err(|e| CliError::usage(e.to_string()))?;
    let verdict = fitting::collapse_feasibility(&spec, &args.beta, COLLAPSE_TOLERANCE)
        .map_err(|e| CliError::usage(e.to_string()))?;
    match verdict {
        CollapseVerdict::Feasible => println!("Feasible"),
        CollapseVerdict::Infeasible { gap } => {
            println!("Infeasible gap={}", format_float(gap))
        }
    }
    Ok(())
}

