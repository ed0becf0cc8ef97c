//! Multi-seed trial orchestration: run one training configuration across
//! seeds, evaluate each final generator, and aggregate in seed order so the
//! result is independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalError, EvalReport, DEFAULT_KL_SMOOTHING, DEFAULT_QUALITY_SIGMA};
use crate::mixture::MixtureSpec;
use crate::trainer::{self, RunLog, TrainConfig, TrainError};

/// Sub-stream of the per-seed generator reserved for evaluation sampling,
/// disjoint from the training stream.
const EVAL_STREAM: u64 = 1;

pub const DEFAULT_EVAL_SAMPLES: usize = 25_600;
pub const DEFAULT_TRIALS: usize = 10;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("trial count must be at least 1")]
    NoTrials,
    #[error("evaluation sample count must be at least 1")]
    NoEvalSamples,
    #[error("seed {seed}: {source}")]
    Trial { seed: u64, source: TrainError },
    #[error("seed {seed}: {source}")]
    Eval { seed: u64, source: EvalError },
    #[error("thread pool: {0}")]
    Pool(String),
}

impl ExperimentError {
    /// The seed of the failing trial, when one is implicated.
    pub fn seed(&self) -> Option<u64> {
        match self {
            Self::Trial { seed, .. } | Self::Eval { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}

/// Settings for the per-run evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub samples: usize,
    pub quality_sigma: f64,
    pub kl_smoothing: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples: DEFAULT_EVAL_SAMPLES,
            quality_sigma: DEFAULT_QUALITY_SIGMA,
            kl_smoothing: DEFAULT_KL_SMOOTHING,
        }
    }
}

/// One seed's finished run plus its evaluation.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub seed: u64,
    pub run: RunLog,
    pub eval: EvalReport,
    /// Wall-clock time of this trial, train plus evaluation.
    pub wall_seconds: f64,
}

/// Cross-seed summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub trials: usize,
    pub median_modes_covered: f64,
    pub mean_modes_covered: f64,
    pub median_kl_to_real: f64,
    pub mean_kl_to_real: f64,
    pub median_high_quality_fraction: f64,
}

/// Seeds are consecutive from the base so a run is reproducible from two
/// numbers: base seed and trial count.
pub fn derive_seeds(base_seed: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64).map(|i| base_seed.wrapping_add(i)).collect()
}

/// Draw a fresh evaluation dump from a finished run's generator and score it.
pub fn evaluate_run(
    run: &RunLog,
    spec: &MixtureSpec,
    settings: &EvalSettings,
) -> Result<EvalReport, ExperimentError> {
    let seed = run.config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    let samples = trainer::generate(&run.config.generator, &run.generator, settings.samples, &mut rng)
        .map_err(|source| ExperimentError::Trial { seed, source })?;
    eval::mode_coverage(&samples, spec, settings.quality_sigma, settings.kl_smoothing)
        .map_err(|source| ExperimentError::Eval { seed, source })
}

/// Train and evaluate a single seed.
pub fn run_trial(
    config: &TrainConfig,
    spec: &MixtureSpec,
    settings: &EvalSettings,
    seed: u64,
) -> Result<TrialResult, ExperimentError> {
    let started = std::time::Instant::now();
    let cfg = TrainConfig { seed, ..config.clone() };
    let run = trainer::train(&cfg, spec).map_err(|source| ExperimentError::Trial { seed, source })?;
    let eval = evaluate_run(&run, spec, settings)?;
    Ok(TrialResult { seed, run, eval, wall_seconds: started.elapsed().as_secs_f64() })
}

/// Run `trials` consecutive seeds, optionally in parallel. Results come back
/// in seed order whatever the completion order was.
pub fn run_trials(
    config: &TrainConfig,
    spec: &MixtureSpec,
    settings: &EvalSettings,
    base_seed: u64,
    trials: usize,
    jobs: usize,
) -> Result<Vec<TrialResult>, ExperimentError> {
    if trials == 0 {
        return Err(ExperimentError::NoTrials);
    }
    if settings.samples == 0 {
        return Err(ExperimentError::NoEvalSamples);
    }
    let seeds = derive_seeds(base_seed, trials);
    if jobs <= 1 {
        return seeds.iter().map(|&s| run_trial(config, spec, settings, s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&s| run_trial(config, spec, settings, s))
            .collect()
    })
}

/// Summarize evaluations across seeds. Input order does not matter.
pub fn aggregate(trials: &[TrialResult]) -> Aggregate {
    assert!(!trials.is_empty(), "aggregate needs at least one trial");
    let modes: Vec<f64> = trials.iter().map(|t| t.eval.modes_covered as f64).collect();
    let kls: Vec<f64> = trials.iter().map(|t| t.eval.kl_to_real).collect();
    let hq: Vec<f64> = trials.iter().map(|t| t.eval.high_quality_fraction).collect();
    Aggregate {
        trials: trials.len(),
        median_modes_covered: median(modes.clone()),
        mean_modes_covered: mean(&modes),
        median_kl_to_real: median(kls.clone()),
        mean_kl_to_real: mean(&kls),
        median_high_quality_fraction: median(hq),
    }
}

/// Median with the usual midpoint convention for even counts.
pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty(), "median of an empty set");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
