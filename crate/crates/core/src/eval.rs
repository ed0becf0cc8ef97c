//! Coverage and quality metrics for generated 2D samples: nearest-center
//! mode assignment, per-mode histograms with a KL score, and the optimal
//! discriminator estimated with a kernel density fit.

use serde::Serialize;
use thiserror::Error;

use crate::matrix::Matrix;
use crate::mixture::MixtureSpec;

/// A sample is high quality when it lies within this many component stds of
/// its assigned center.
pub const DEFAULT_QUALITY_SIGMA: f64 = 3.0;

/// Added to empirical mode probabilities so zero-count modes keep the KL
/// finite.
pub const DEFAULT_KL_SMOOTHING: f64 = 1e-6;

/// Kernel density needs at least this many points to say anything.
pub const MIN_DENSITY_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("samples must have 2 columns, got {got}")]
    BadWidth { got: usize },
    #[error("generated dump is degenerate (zero spread); no density fit possible")]
    DegenerateDump,
}

/// Nearest-center labels plus the quality flag for each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeAssignment {
    pub labels: Vec<usize>,
    pub high_quality: Vec<bool>,
}

/// Coverage metrics over the high-quality subset of a sample dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub modes_covered: usize,
    pub per_mode_counts: Vec<u64>,
    /// KL(generated mode frequencies || real component weights).
    pub kl_to_real: f64,
    pub high_quality_fraction: f64,
    pub samples_evaluated: u64,
}

/// Label every sample with its nearest component center (ties to the lowest
/// index) and flag it high quality within `quality_sigma` component stds.
pub fn assign_modes(samples: &Matrix, spec: &MixtureSpec, quality_sigma: f64) -> Result<ModeAssignment, EvalError> {
    if samples.rows() == 0 {
        return Err(EvalError::TooFewSamples { min: 1, got: 0 });
    }
    if samples.cols() != 2 {
        return Err(EvalError::BadWidth { got: samples.cols() });
    }
    let mut labels = Vec::with_capacity(samples.rows());
    let mut high_quality = Vec::with_capacity(samples.rows());
    for i in 0..samples.rows() {
        let row = samples.row(i);
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (k, c) in spec.components().iter().enumerate() {
            let dx = row[0] - c.center[0];
            let dy = row[1] - c.center[1];
            let d2 = dx * dx + dy * dy;
            if d2 < best_d2 {
                best = k;
                best_d2 = d2;
            }
        }
        let cutoff = quality_sigma * spec.components()[best].std;
        labels.push(best);
        high_quality.push(best_d2.sqrt() <= cutoff);
    }
    Ok(ModeAssignment { labels, high_quality })
}

/// KL divergence from smoothed empirical mode frequencies to the mixture
/// weights: sum of q_k * ln(q_k / weight_k).
pub fn kl_over_modes(per_mode_counts: &[u64], weights: &[f64], smoothing: f64) -> f64 {
    assert_eq!(per_mode_counts.len(), weights.len(), "count/weight length mismatch");
    assert!(smoothing > 0.0, "smoothing must be positive");
    let total: u64 = per_mode_counts.iter().sum();
    let k = weights.len() as f64;
    per_mode_counts
        .iter()
        .zip(weights)
        .map(|(&c, &w)| {
            let p = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            let q = (p + smoothing) / (1.0 + k * smoothing);
            q * (q / w).ln()
        })
        .sum()
}

/// Full coverage report over the high-quality samples of a dump.
pub fn mode_coverage(
    samples: &Matrix,
    spec: &MixtureSpec,
    quality_sigma: f64,
    smoothing: f64,
) -> Result<EvalReport, EvalError> {
    let assignment = assign_modes(samples, spec, quality_sigma)?;
    let mut per_mode_counts = vec![0u64; spec.k()];
    let mut assigned_counts = vec![0u64; spec.k()];
    let mut high_quality = 0u64;
    for (&label, &hq) in assignment.labels.iter().zip(&assignment.high_quality) {
        assigned_counts[label] += 1;
        if hq {
            per_mode_counts[label] += 1;
            high_quality += 1;
        }
    }
    let modes_covered = per_mode_counts.iter().filter(|&&c| c > 0).count();
    // The divergence uses every sample's nearest-center assignment, not just
    // the high-quality subset: each sample contributes a class, so a run with
    // no high-quality output still gets an honest (large) score instead of a
    // vanishing-mass histogram that would read as near-perfect.
    let kl_to_real = kl_over_modes(&assigned_counts, &spec.weights(), smoothing);
    Ok(EvalReport {
        modes_covered,
        per_mode_counts,
        kl_to_real,
        high_quality_fraction: high_quality as f64 / samples.rows() as f64,
        samples_evaluated: samples.rows() as u64,
    })
}

/// The discriminator a perfect adversary would learn:
/// real density / (real density + generated density), with the generated
/// density fit by a Gaussian-product kernel (Silverman bandwidths).
///
/// The real density is convolved with the same kernel so both sides are
/// compared at the kernel's resolution; against the raw analytic density
/// the estimate would read near 1 everywhere once components are much
/// narrower than any data-driven bandwidth, even for a perfect generator.
pub fn optimal_d_diagnostic(
    spec: &MixtureSpec,
    generated: &Matrix,
    eval_points: &[[f64; 2]],
) -> Result<Vec<f64>, EvalError> {
    let n = generated.rows();
    if n < MIN_DENSITY_SAMPLES {
        return Err(EvalError::TooFewSamples { min: MIN_DENSITY_SAMPLES, got: n });
    }
    if generated.cols() != 2 {
        return Err(EvalError::BadWidth { got: generated.cols() });
    }
    let stds = generated.col_stds(0.0);
    if stds.iter().any(|&s| s == 0.0) {
        return Err(EvalError::DegenerateDump);
    }
    // Silverman's rule in two dimensions: h = std * n^(-1/6).
    let scale = (n as f64).powf(-1.0 / 6.0);
    let (hx, hy) = (stds[0] * scale, stds[1] * scale);
    let norm = 1.0 / (n as f64 * hx * hy * std::f64::consts::TAU);
    Ok(eval_points
        .iter()
        .map(|&[x, y]| {
            let mut kernel_sum = 0.0;
            for i in 0..n {
                let row = generated.row(i);
                let ux = (x - row[0]) / hx;
                let uy = (y - row[1]) / hy;
                kernel_sum += (-0.5 * (ux * ux + uy * uy)).exp();
            }
            let p_g = norm * kernel_sum;
            let p_real = smoothed_density(spec, [x, y], hx, hy);
            p_real / (p_real + p_g)
        })
        .collect())
}

/// Mixture density convolved with the Gaussian-product kernel of the given
/// bandwidths: each component's variance grows by the squared bandwidth.
fn smoothed_density(spec: &MixtureSpec, x: [f64; 2], hx: f64, hy: f64) -> f64 {
    spec.components()
        .iter()
        .map(|c| {
            let vx = c.std * c.std + hx * hx;
            let vy = c.std * c.std + hy * hy;
            let dx = x[0] - c.center[0];
            let dy = x[1] - c.center[1];
            c.weight * (-0.5 * (dx * dx / vx + dy * dy / vy)).exp()
                / (std::f64::consts::TAU * (vx * vy).sqrt())
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{ring_spec, sample, Component};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring8() -> MixtureSpec {
        ring_spec(8, 2.0, 0.02, None).unwrap()
    }

    #[test]
    fn samples_at_centers_are_assigned_and_high_quality() {
        let spec = ring8();
        let rows: Vec<Vec<f64>> =
            spec.components().iter().map(|c| c.center.to_vec()).collect();
        let assignment = assign_modes(&Matrix::from_rows(&rows), &spec, 3.0).unwrap();
        assert_eq!(assignment.labels, (0..8).collect::<Vec<_>>());
        assert!(assignment.high_quality.iter().all(|&q| q));
    }

    #[test]
    fn distant_sample_is_low_quality() {
        let spec = ring8();
        // 10 component stds past the first center.
        let m = Matrix::from_rows(&[vec![2.0 + 0.2, 0.0]]);
        let assignment = assign_modes(&m, &spec, 3.0).unwrap();
        assert_eq!(assignment.labels, vec![0]);
        assert_eq!(assignment.high_quality, vec![false]);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let spec = MixtureSpec::new(vec![
            Component { weight: 0.5, center: [-1.0, 0.0], std: 0.1 },
            Component { weight: 0.5, center: [1.0, 0.0], std: 0.1 },
        ])
        .unwrap();
        let assignment =
            assign_modes(&Matrix::from_rows(&[vec![0.0, 5.0]]), &spec, 3.0).unwrap();
        assert_eq!(assignment.labels, vec![0]);
    }

    #[test]
    fn one_sample_per_center_covers_everything() {
        let spec = ring8();
        let rows: Vec<Vec<f64>> =
            spec.components().iter().map(|c| c.center.to_vec()).collect();
        let report =
            mode_coverage(&Matrix::from_rows(&rows), &spec, 3.0, DEFAULT_KL_SMOOTHING).unwrap();
        assert_eq!(report.modes_covered, 8);
        assert_eq!(report.per_mode_counts, vec![1; 8]);
        assert_eq!(report.high_quality_fraction, 1.0);
    }

    #[test]
    fn total_collapse_scores_log_k() {
        let spec = ring8();
        let rows = vec![vec![2.0, 0.0]; 100];
        let report =
            mode_coverage(&Matrix::from_rows(&rows), &spec, 3.0, DEFAULT_KL_SMOOTHING).unwrap();
        assert_eq!(report.modes_covered, 1);
        assert!((report.kl_to_real - 8.0_f64.ln()).abs() < 1e-3, "kl {}", report.kl_to_real);
    }

    #[test]
    fn matching_frequencies_score_near_zero() {
        let counts = [125u64; 8];
        let kl = kl_over_modes(&counts, &vec![0.125; 8], DEFAULT_KL_SMOOTHING);
        assert!(kl.abs() < 1e-9, "kl {kl}");
    }

    #[test]
    fn true_samples_cover_all_modes_with_small_kl() {
        let spec = ring8();
        let draw = sample(&spec, 25_600, &mut ChaCha8Rng::seed_from_u64(2));
        let report = mode_coverage(&draw.samples, &spec, 3.0, DEFAULT_KL_SMOOTHING).unwrap();
        assert_eq!(report.modes_covered, 8);
        assert!(report.kl_to_real < 0.01, "kl {}", report.kl_to_real);
        // Multinomial 3 sigma band around 3200 per mode.
        let band = 3.0 * (25_600.0_f64 * 0.125 * 0.875).sqrt();
        for &c in &report.per_mode_counts {
            assert!((c as f64 - 3200.0).abs() < band, "count {c}");
        }
    }

    #[test]
    fn adding_samples_never_uncovers_modes() {
        let spec = ring8();
        let base = sample(&spec, 64, &mut ChaCha8Rng::seed_from_u64(5));
        let more = sample(&spec, 64, &mut ChaCha8Rng::seed_from_u64(6));
        let before =
            mode_coverage(&base.samples, &spec, 3.0, DEFAULT_KL_SMOOTHING).unwrap().modes_covered;
        let mut rows = Vec::new();
        for i in 0..base.samples.rows() {
            rows.push(base.samples.row(i).to_vec());
        }
        for i in 0..more.samples.rows() {
            rows.push(more.samples.row(i).to_vec());
        }
        let after = mode_coverage(&Matrix::from_rows(&rows), &spec, 3.0, DEFAULT_KL_SMOOTHING)
            .unwrap()
            .modes_covered;
        assert!(after >= before);
    }

    #[test]
    fn translated_world_keeps_assignments() {
        let spec = ring8();
        let draw = sample(&spec, 200, &mut ChaCha8Rng::seed_from_u64(8));
        let base = assign_modes(&draw.samples, &spec, 3.0).unwrap();
        let shift = [10.5, -3.25];
        let moved_rows: Vec<Vec<f64>> = (0..draw.samples.rows())
            .map(|i| {
                let r = draw.samples.row(i);
                vec![r[0] + shift[0], r[1] + shift[1]]
            })
            .collect();
        let moved_spec = MixtureSpec::new(
            spec.components()
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    center: [c.center[0] + shift[0], c.center[1] + shift[1]],
                    std: c.std,
                })
                .collect(),
        )
        .unwrap();
        let moved = assign_modes(&Matrix::from_rows(&moved_rows), &moved_spec, 3.0).unwrap();
        assert_eq!(base.labels, moved.labels);
    }

    #[test]
    fn perfect_generator_faces_a_coin_flip_discriminator() {
        let spec = ring8();
        let generated = sample(&spec, 2000, &mut ChaCha8Rng::seed_from_u64(3));
        let probe = sample(&spec, 400, &mut ChaCha8Rng::seed_from_u64(4));
        let points: Vec<[f64; 2]> = (0..probe.samples.rows())
            .map(|i| {
                let r = probe.samples.row(i);
                [r[0], r[1]]
            })
            .collect();
        let values = optimal_d_diagnostic(&spec, &generated.samples, &points).unwrap();
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "mean D* {mean}");
    }

    #[test]
    fn collapsed_generator_is_caught_at_the_other_centers() {
        let spec = ring8();
        let collapsed = MixtureSpec::new(vec![Component {
            weight: 1.0,
            center: [2.0, 0.0],
            std: 0.02,
        }])
        .unwrap();
        let generated = sample(&collapsed, 1000, &mut ChaCha8Rng::seed_from_u64(9));
        let points: Vec<[f64; 2]> =
            spec.components()[1..].iter().map(|c| c.center).collect();
        let values = optimal_d_diagnostic(&spec, &generated.samples, &points).unwrap();
        assert!(values.iter().all(|&v| v > 0.99), "values {values:?}");
    }

    #[test]
    fn degenerate_dump_is_rejected() {
        let spec = ring8();
        let rows = vec![vec![1.0, 1.0]; 200];
        assert!(matches!(
            optimal_d_diagnostic(&spec, &Matrix::from_rows(&rows), &[[0.0, 0.0]]),
            Err(EvalError::DegenerateDump)
        ));
        assert!(matches!(
            optimal_d_diagnostic(&spec, &Matrix::zeros(10, 2), &[[0.0, 0.0]]),
            Err(EvalError::TooFewSamples { .. })
        ));
    }
}
