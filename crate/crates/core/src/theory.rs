//! Exact and Monte-Carlo probabilities for batches that under-sample
//! mixture components: missing-component events, dominated-subset events,
//! batch-size sweeps, and overlap-region sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::mixture::{self, MixtureSpec};
use crate::sums::exact_sum;

/// Exact enumeration is 2^K; beyond this the closed form is skipped.
pub const MAX_EXACT_COMPONENTS: usize = 20;

/// Monte-Carlo floor: below this the normal-theory error bars are junk.
pub const MIN_TRIALS: u64 = 1000;

/// Density threshold defining "overlap", as a fraction of a component's
/// peak. A sample within `overlap_radius_for_peak_fraction(f)` component
/// stds of two centers sits in both components' above-threshold regions.
pub const DEFAULT_OVERLAP_PEAK_FRACTION: f64 = 0.01;

pub fn overlap_radius_for_peak_fraction(fraction: f64) -> f64 {
    (-2.0 * fraction.ln()).sqrt()
}

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("exact enumeration supports at most {max} components, got {got}")]
    TooManyComponents { max: usize, got: usize },
    #[error("need at least two components, got {got}")]
    TooFewComponents { got: usize },
    #[error("weights must be positive, got {weight} at index {index}")]
    BadWeight { index: usize, weight: f64 },
    #[error("weights sum to {sum}, expected 1")]
    BadWeightSum { sum: f64 },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("need at least {min} trials, got {got}")]
    TooFewTrials { min: u64, got: u64 },
    #[error("{what} must be strictly increasing")]
    NotIncreasing { what: &'static str },
    #[error("{what} must be positive")]
    NotPositive { what: &'static str },
    #[error("dominance subset must be a nonempty proper subset with valid indices")]
    BadSubset,
}

/// One batch-sampling experiment: which mixture, how many draws, and which
/// event is being measured.
#[derive(Debug, Clone)]
pub struct SamplingScenario {
    pub spec: MixtureSpec,
    pub batch_size: usize,
    /// `None`: the event is "at least one component receives no samples".
    /// `Some(s)`: the event is "every sample's label lands inside `s`".
    pub dominance: Option<Vec<usize>>,
    /// Overlap-region radius in units of each component's std.
    pub overlap_radius: f64,
}

impl SamplingScenario {
    pub fn new(spec: MixtureSpec, batch_size: usize) -> Result<Self, TheoryError> {
        if batch_size == 0 {
            return Err(TheoryError::ZeroBatch);
        }
        Ok(Self {
            spec,
            batch_size,
            dominance: None,
            overlap_radius: overlap_radius_for_peak_fraction(DEFAULT_OVERLAP_PEAK_FRACTION),
        })
    }

    pub fn with_dominance(mut self, subset: Vec<usize>) -> Result<Self, TheoryError> {
        let k = self.spec.k();
        if subset.is_empty() || subset.len() >= k || subset.iter().any(|&i| i >= k) {
            return Err(TheoryError::BadSubset);
        }
        self.dominance = Some(subset);
        Ok(self)
    }
}

/// A Monte-Carlo frequency with its binomial standard error and, when the
/// closed form is tractable, the exact value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbabilityEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub trials: u64,
    pub exact: Option<f64>,
}

fn validate_weights(weights: &[f64]) -> Result<(), TheoryError> {
    for (index, &weight) in weights.iter().enumerate() {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(TheoryError::BadWeight { index, weight });
        }
    }
    let sum = exact_sum(weights.iter().copied());
    if (sum - 1.0).abs() > 1e-12 {
        return Err(TheoryError::BadWeightSum { sum });
    }
    Ok(())
}

/// Probability that a batch of `b` label draws misses at least one
/// component, by inclusion-exclusion over the 2^K missed-subset lattice.
pub fn exact_nonuniform_probability(weights: &[f64], b: usize) -> Result<f64, TheoryError> {
    validate_weights(weights)?;
    let k = weights.len();
    if k > MAX_EXACT_COMPONENTS {
        return Err(TheoryError::TooManyComponents { max: MAX_EXACT_COMPONENTS, got: k });
    }
    if b == 0 {
        return Err(TheoryError::ZeroBatch);
    }
    if k == 1 {
        return Ok(0.0);
    }
    let mut p = 0.0;
    // Proper nonempty subsets of missed components.
    for mask in 1..((1u32 << k) - 1) {
        let mut missed = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if mask & (1 << i) != 0 {
                missed += w;
            }
        }
        let term = (1.0 - missed).powi(b as i32);
        if mask.count_ones() % 2 == 1 {
            p += term;
        } else {
            p -= term;
        }
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Probability that every one of `b` draws lands inside `subset`.
pub fn exact_subset_probability(
    weights: &[f64],
    subset: &[usize],
    b: usize,
) -> Result<f64, TheoryError> {
    validate_weights(weights)?;
    if b == 0 {
        return Err(TheoryError::ZeroBatch);
    }
    if subset.is_empty() || subset.len() >= weights.len()
        || subset.iter().any(|&i| i >= weights.len())
    {
        return Err(TheoryError::BadSubset);
    }
    let mass: f64 = subset.iter().map(|&i| weights[i]).sum();
    Ok(mass.powi(b as i32))
}

fn draw_label<R: Rng>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    for (k, &c) in cdf.iter().enumerate() {
        if u < c {
            return k;
        }
    }
    cdf.len() - 1
}

fn cdf_of(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|&w| {
            acc += w;
            acc
        })
        .collect()
}

/// Count how many of `trials` per-trial events fire. Each trial runs on its
/// own counter-derived ChaCha stream, so the count is identical no matter
/// how the trials are scheduled across threads.
fn mc_count<F: Fn(&mut ChaCha8Rng) -> bool + Sync>(
    seed: u64,
    stream_base: u64,
    trials: u64,
    event: F,
) -> u64 {
    let template = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = template.clone();
            rng.set_stream(stream_base + trial);
            u64::from(event(&mut rng))
        })
        .sum()
}

fn estimate_from_count(hits: u64, trials: u64, exact: Option<f64>) -> ProbabilityEstimate {
    let estimate = hits as f64 / trials as f64;
    let std_error = (estimate * (1.0 - estimate) / trials as f64).sqrt();
    ProbabilityEstimate { estimate, std_error, trials, exact }
}

/// Monte-Carlo estimate of the scenario's event over label draws alone.
pub fn mc_nonuniform_probability(
    scenario: &SamplingScenario,
    trials: u64,
    seed: u64,
) -> Result<ProbabilityEstimate, TheoryError> {
    if trials < MIN_TRIALS {
        return Err(TheoryError::TooFewTrials { min: MIN_TRIALS, got: trials });
    }
    let weights = scenario.spec.weights();
    let k = weights.len();
    if k < 2 {
        return Err(TheoryError::TooFewComponents { got: k });
    }
    if k > 64 {
        return Err(TheoryError::TooManyComponents { max: 64, got: k });
    }
    let b = scenario.batch_size;
    let cdf = cdf_of(&weights);
    let (hits, exact) = match &scenario.dominance {
        None => {
            let full: u64 = if k == 64 { u64::MAX } else { (1 << k) - 1 };
            let hits = mc_count(seed, 0, trials, |rng| {
                let mut seen = 0u64;
                for _ in 0..b {
                    seen |= 1 << draw_label(&cdf, rng);
                    if seen == full {
                        return false;
                    }
                }
                true
            });
            let exact = (k <= MAX_EXACT_COMPONENTS)
                .then(|| exact_nonuniform_probability(&weights, b))
                .transpose()?;
            (hits, exact)
        }
        Some(subset) => {
            let mut inside = 0u64;
            for &i in subset {
                inside |= 1 << i;
            }
            let hits = mc_count(seed, 0, trials, |rng| {
                (0..b).all(|_| inside & (1 << draw_label(&cdf, rng)) != 0)
            });
            (hits, Some(exact_subset_probability(&weights, subset, b)?))
        }
    };
    Ok(estimate_from_count(hits, trials, exact))
}

/// Missing-component probability across increasing batch sizes.
pub fn batch_size_sweep(
    weights: &[f64],
    b_values: &[usize],
    trials: u64,
    seed: u64,
) -> Result<Vec<(usize, ProbabilityEstimate)>, TheoryError> {
    validate_weights(weights)?;
    if b_values.is_empty() || b_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TheoryError::NotIncreasing { what: "batch sizes" });
    }
    if trials < MIN_TRIALS {
        return Err(TheoryError::TooFewTrials { min: MIN_TRIALS, got: trials });
    }
    let k = weights.len();
    if k < 2 {
        return Err(TheoryError::TooFewComponents { got: k });
    }
    if k > 64 {
        return Err(TheoryError::TooManyComponents { max: 64, got: k });
    }
    let cdf = cdf_of(weights);
    let full: u64 = if k == 64 { u64::MAX } else { (1 << k) - 1 };
    let mut out = Vec::with_capacity(b_values.len());
    for (index, &b) in b_values.iter().enumerate() {
        if b == 0 {
            return Err(TheoryError::ZeroBatch);
        }
        // Distinct stream range per sweep entry keeps entries independent.
        let hits = mc_count(seed, index as u64 * trials, trials, |rng| {
            let mut seen = 0u64;
            for _ in 0..b {
                seen |= 1 << draw_label(&cdf, rng);
                if seen == full {
                    return false;
                }
            }
            true
        });
        let exact = (k <= MAX_EXACT_COMPONENTS)
            .then(|| exact_nonuniform_probability(weights, b))
            .transpose()?;
        out.push((b, estimate_from_count(hits, trials, exact)));
    }
    Ok(out)
}

/// P(no sample of a size-`b` batch lands in the overlap region) across
/// increasing component stds. The overlap region is everywhere that at
/// least two components are above the peak-fraction threshold.
pub fn overlap_sweep(
    base_spec: &MixtureSpec,
    component_stds: &[f64],
    b: usize,
    trials: u64,
    overlap_radius: f64,
    seed: u64,
) -> Result<Vec<(f64, ProbabilityEstimate)>, TheoryError> {
    if component_stds.is_empty() || component_stds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TheoryError::NotIncreasing { what: "component stds" });
    }
    if component_stds[0] <= 0.0 {
        return Err(TheoryError::NotPositive { what: "component stds" });
    }
    if b == 0 {
        return Err(TheoryError::ZeroBatch);
    }
    if trials < MIN_TRIALS {
        return Err(TheoryError::TooFewTrials { min: MIN_TRIALS, got: trials });
    }
    if !(overlap_radius > 0.0) {
        return Err(TheoryError::NotPositive { what: "overlap radius" });
    }
    let mut out = Vec::with_capacity(component_stds.len());
    for (index, &std) in component_stds.iter().enumerate() {
        let components: Vec<_> = base_spec
            .components()
            .iter()
            .map(|c| mixture::Component { std, ..c.clone() })
            .collect();
        let spec = MixtureSpec::new(components).expect("rescaled spec stays valid");
        let radius = overlap_radius * std;
        let r2 = radius * radius;
        let hits = mc_count(seed, index as u64 * trials, trials, |rng| {
            let draw = mixture::sample(&spec, b, rng);
            for i in 0..b {
                let row = draw.samples.row(i);
                let mut close = 0;
                for c in spec.components() {
                    let dx = row[0] - c.center[0];
                    let dy = row[1] - c.center[1];
                    if dx * dx + dy * dy <= r2 {
                        close += 1;
                        if close >= 2 {
                            return false;
                        }
                    }
                }
            }
            true
        });
        out.push((std, estimate_from_count(hits, trials, None)));
    }
    Ok(out)
}
