//! Distribution-fitting machinery: per-batch statistics against fixed or
//! running targets, the penalty that matches them, and the mean-matching
//! collapse-feasibility check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::matrix::Matrix;
use crate::mixture::MixtureSpec;
use crate::sums::exact_sum;

/// Guard added to variances before square roots, shared between the graph
/// std and the penalty so the two always agree.
pub const STD_EPSILON: f64 = 1e-8;

/// Absolute L1 tolerance for the mean-matching feasibility test.
pub const COLLAPSE_TOLERANCE: f64 = 1e-9;

/// Sampling noise makes even a perfectly matched batch pay a small penalty,
/// and for the ring-of-8 it concentrates like 1/sqrt(batch size). The
/// coefficient was frozen ahead of time from a 100k-draw simulation at
/// b in {128, 512, 2048} (the 99.9th percentile times sqrt(b) came out
/// between 4.07 and 4.19; see examples/calibrate_penalty.rs) and is not
/// tuned against any test draw.
pub const REAL_BATCH_PENALTY_COEFF: f64 = 4.5;

/// Calibrated upper bound on the penalty a real batch of `b` ring samples
/// should pay; batches land below it in well over 99% of draws.
pub fn real_batch_penalty_threshold(b: usize) -> f64 {
    REAL_BATCH_PENALTY_COEFF / (b as f64).sqrt()
}

#[derive(Debug, Error)]
pub enum FittingError {
    #[error("batch must have at least one row")]
    EmptyBatch,
    #[error("batch contains a non-finite value")]
    NonFiniteBatch,
    #[error("accumulator tracks {expected} dimensions, batch has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("snapshot needs at least 2 accumulated samples, have {count}")]
    TooFewSamples { count: u64 },
    #[error("penalty needs a generated batch of at least 2 rows, got {rows}")]
    SmallBatch { rows: usize },
    #[error("penalty target has {target} dimensions, generated batch has {batch}")]
    TargetDims { target: usize, batch: usize },
    #[error("penalty target represents {count} samples, need at least 2")]
    TargetCount { count: u64 },
    #[error("expected {expected} sampled weights, got {got}")]
    BetaLength { expected: usize, got: usize },
    #[error("sampled weight {index} is {value}, expected non-negative")]
    BetaNegative { index: usize, value: f64 },
    #[error("sampled weights sum to {sum}, expected 1")]
    BetaSum { sum: f64 },
    #[error("assignment leaves no component at zero weight, so it is not a collapse")]
    BetaNotCollapsed,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Per-dimension mean and population std. `count` is the number of samples
/// behind the snapshot; `None` marks analytic statistics (the exact
/// infinite-sample values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: Option<u64>,
}

impl StatsSnapshot {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }
}

/// Streaming per-dimension sums for mean/std over everything seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl RunningStats {
    pub fn new(dims: usize) -> Self {
        Self { count: 0, sum: vec![0.0; dims], sum_sq: vec![0.0; dims] }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Fold a batch into the running sums.
    pub fn update(&mut self, batch: &Matrix) -> Result<(), FittingError> {
        if batch.rows() == 0 {
            return Err(FittingError::EmptyBatch);
        }
        if batch.cols() != self.sum.len() {
            return Err(FittingError::DimMismatch { expected: self.sum.len(), got: batch.cols() });
        }
        if !batch.is_finite() {
            return Err(FittingError::NonFiniteBatch);
        }
        for i in 0..batch.rows() {
            for (j, &v) in batch.row(i).iter().enumerate() {
                self.sum[j] += v;
                self.sum_sq[j] += v * v;
            }
        }
        self.count += batch.rows() as u64;
        Ok(())
    }

    /// Mean and population std of the stream so far. Needs two samples.
    pub fn snapshot(&self) -> Result<StatsSnapshot, FittingError> {
        if self.count < 2 {
            return Err(FittingError::TooFewSamples { count: self.count });
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|&s| s / n).collect();
        let std = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(&sq, &m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(StatsSnapshot { mean, std, count: Some(self.count) })
    }
}

/// Which target, if any, the generated batch statistics are pulled toward.
#[derive(Debug, Clone)]
pub enum PenaltyMode {
    /// No penalty; the loss reduces to the plain adversarial objective.
    None,
    /// Fixed target computed once from the whole real distribution.
    Gdf { target: StatsSnapshot },
    /// Running target over every real batch sampled so far.
    Ldf { accumulator: RunningStats },
}

/// Mean absolute gap between batch statistics and the target, per Eq. of the
/// fitted objective: (1/n) * (L1(mean_g - mean_t) + L1(std_g - std_t)),
/// built on the tape so it is differentiable through `generated`.
///
/// The target is a constant: no gradient flows into it.
pub fn penalty(
    tape: &mut Tape,
    generated: NodeId,
    mode: &PenaltyMode,
    epsilon: f64,
) -> Result<NodeId, FittingError> {
    let target = match mode {
        PenaltyMode::None => {
            return Ok(tape.leaf(Matrix::scalar(0.0), false)?);
        }
        PenaltyMode::Gdf { target } => {
            if let Some(count) = target.count {
                if count < 2 {
                    return Err(FittingError::TargetCount { count });
                }
            }
            target.clone()
        }
        PenaltyMode::Ldf { accumulator } => accumulator.snapshot()?,
    };
    let (rows, cols) = tape.shape(generated);
    if rows < 2 {
        return Err(FittingError::SmallBatch { rows });
    }
    if target.dims() != cols {
        return Err(FittingError::TargetDims { target: target.dims(), batch: cols });
    }

    let mean_g = tape.mean_rows(generated);
    let std_g = tape.std_rows(generated, epsilon)?;
    let mean_t = tape.leaf(Matrix::from_vec(1, cols, target.mean.clone()), false)?;
    let std_t = tape.leaf(Matrix::from_vec(1, cols, target.std.clone()), false)?;

    let neg_mean_t = tape.neg(mean_t);
    let mean_diff = tape.add(mean_g, neg_mean_t)?;
    let mean_abs = tape.abs(mean_diff);
    let mean_l1 = tape.sum_all(mean_abs);

    let neg_std_t = tape.neg(std_t);
    let std_diff = tape.add(std_g, neg_std_t)?;
    let std_abs = tape.abs(std_diff);
    let std_l1 = tape.sum_all(std_abs);

    let total = tape.add(mean_l1, std_l1)?;
    Ok(tape.scale(total, 1.0 / cols as f64)?)
}

/// Outcome of the mean-matching feasibility test for a collapsed assignment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CollapseVerdict {
    /// The collapsed weights reproduce the global mean, so a mean-matching
    /// penalty alone cannot rule this collapse out.
    Feasible,
    /// The global means differ by `gap` in L1; the penalty excludes it.
    Infeasible { gap: f64 },
}

/// Test whether sampled weights `beta` that miss at least one component can
/// still reproduce the mixture's global mean within `tol`.
pub fn collapse_feasibility(
    spec: &MixtureSpec,
    beta: &[f64],
    tol: f64,
) -> Result<CollapseVerdict, FittingError> {
    let k = spec.k();
    if beta.len() != k {
        return Err(FittingError::BetaLength { expected: k, got: beta.len() });
    }
    for (index, &value) in beta.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(FittingError::BetaNegative { index, value });
        }
    }
    let sum = exact_sum(beta.iter().copied());
    if (sum - 1.0).abs() > 1e-12 {
        return Err(FittingError::BetaSum { sum });
    }
    // Mixture weights are all positive, so a collapse just means some beta
    // is exactly zero.
    if !beta.iter().any(|&b| b == 0.0) {
        return Err(FittingError::BetaNotCollapsed);
    }
    let mut gap = 0.0;
    for d in 0..2 {
        let real = exact_sum(spec.components().iter().map(|c| c.weight * c.center[d]));
        let collapsed =
            exact_sum(spec.components().iter().zip(beta).map(|(c, &b)| b * c.center[d]));
        gap += (real - collapsed).abs();
    }
    if gap <= tol {
        Ok(CollapseVerdict::Feasible)
    } else {
        Ok(CollapseVerdict::Infeasible { gap })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{ring_spec, Component};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spread_batch() -> Matrix {
        Matrix::from_rows(&[vec![0.0], vec![2.0]])
    }

    #[test]
    fn running_two_point_stream() {
        let mut acc = RunningStats::new(1);
        acc.update(&spread_batch()).unwrap();
        let snap = acc.snapshot().unwrap();
        assert_eq!(snap.mean, vec![1.0]);
        assert_eq!(snap.std, vec![1.0]);
        assert_eq!(snap.count, Some(2));
    }

    #[test]
    fn running_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = ring_spec(8, 2.0, 0.02, None).unwrap();
        let mut acc = RunningStats::new(2);
        let mut all_rows = Vec::new();
        for _ in 0..50 {
            let draw = crate::mixture::sample(&spec, 64, &mut rng);
            acc.update(&draw.samples).unwrap();
            for i in 0..draw.samples.rows() {
                all_rows.push(draw.samples.row(i).to_vec());
            }
        }
        let streamed = acc.snapshot().unwrap();
        let single = crate::mixture::dataset_pass_stats(&Matrix::from_rows(&all_rows)).unwrap();
        for d in 0..2 {
            assert!((streamed.mean[d] - single.mean[d]).abs() <= 1e-10 * single.mean[d].abs() + 1e-12);
            assert!((streamed.std[d] - single.std[d]).abs() <= 1e-10 * single.std[d]);
        }
    }

    #[test]
    fn running_accepts_single_row_batches() {
        let mut acc = RunningStats::new(1);
        for v in [1.0, 2.0, 3.0, 4.0] {
            acc.update(&Matrix::from_rows(&[vec![v]])).unwrap();
        }
        let snap = acc.snapshot().unwrap();
        assert_eq!(snap.mean, vec![2.5]);
        let expect = (1.25_f64).sqrt();
        assert!((snap.std[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn snapshot_needs_two_samples() {
        let mut acc = RunningStats::new(1);
        assert!(matches!(acc.snapshot(), Err(FittingError::TooFewSamples { count: 0 })));
        acc.update(&Matrix::from_rows(&[vec![5.0]])).unwrap();
        assert!(matches!(acc.snapshot(), Err(FittingError::TooFewSamples { count: 1 })));
    }

    #[test]
    fn constant_stream_has_zero_std() {
        let mut acc = RunningStats::new(1);
        for _ in 0..8 {
            acc.update(&Matrix::from_rows(&[vec![3.5]])).unwrap();
        }
        assert_eq!(acc.snapshot().unwrap().std, vec![0.0]);
    }

    #[test]
    fn update_rejects_bad_batches() {
        let mut acc = RunningStats::new(2);
        assert!(matches!(
            acc.update(&Matrix::from_rows(&[vec![1.0]])),
            Err(FittingError::DimMismatch { expected: 2, got: 1 })
        ));
        assert!(matches!(
            acc.update(&Matrix::from_rows(&[vec![1.0, f64::NAN]])),
            Err(FittingError::NonFiniteBatch)
        ));
    }

    #[test]
    fn penalty_none_is_zero() {
        let mut tape = Tape::new();
        let g = tape.leaf(spread_batch(), true).unwrap();
        let p = penalty(&mut tape, g, &PenaltyMode::None, STD_EPSILON).unwrap();
        assert_eq!(tape.value(p).get(0, 0), 0.0);
    }

    #[test]
    fn penalty_hand_case() {
        // Two dimensions, mean off by (1, 0), stds matching the target
        // exactly (up to the epsilon guard): penalty = (1/2)(1+0) = 0.5.
        let batch = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]);
        let target =
            StatsSnapshot { mean: vec![0.0, 1.0], std: vec![1.0, 1.0], count: None };
        let mut tape = Tape::new();
        let g = tape.leaf(batch, true).unwrap();
        let p = penalty(&mut tape, g, &PenaltyMode::Gdf { target }, 0.0).unwrap();
        assert!((tape.value(p).get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn penalty_of_own_stats_is_epsilon_small() {
        let spec = ring_spec(8, 2.0, 0.02, None).unwrap();
        let draw = crate::mixture::sample(&spec, 256, &mut ChaCha8Rng::seed_from_u64(5));
        let target = crate::mixture::dataset_pass_stats(&draw.samples).unwrap();
        let mut tape = Tape::new();
        let g = tape.leaf(draw.samples, true).unwrap();
        let p = penalty(&mut tape, g, &PenaltyMode::Gdf { target }, STD_EPSILON).unwrap();
        // Only the epsilon inside the graph std separates the two sides.
        assert!(tape.value(p).get(0, 0) <= STD_EPSILON.sqrt() + 1e-12);
    }

    #[test]
    fn penalty_checks_target_shape_and_count() {
        let mut tape = Tape::new();
        let g = tape.leaf(spread_batch(), true).unwrap();
        let skinny =
            StatsSnapshot { mean: vec![0.0, 0.0], std: vec![1.0, 1.0], count: None };
        assert!(matches!(
            penalty(&mut tape, g, &PenaltyMode::Gdf { target: skinny }, 0.0),
            Err(FittingError::TargetDims { target: 2, batch: 1 })
        ));
        let tiny = StatsSnapshot { mean: vec![0.0], std: vec![1.0], count: Some(1) };
        assert!(matches!(
            penalty(&mut tape, g, &PenaltyMode::Gdf { target: tiny }, 0.0),
            Err(FittingError::TargetCount { count: 1 })
        ));
    }

    #[test]
    fn ldf_penalty_uses_running_target() {
        let mut acc = RunningStats::new(1);
        acc.update(&spread_batch()).unwrap();
        let mut tape = Tape::new();
        let g = tape.leaf(spread_batch(), true).unwrap();
        let p = penalty(&mut tape, g, &PenaltyMode::Ldf { accumulator: acc }, 0.0).unwrap();
        // Batch and accumulator hold the same data: penalty is zero.
        assert!(tape.value(p).get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn single_mode_collapse_on_the_ring_is_infeasible() {
        let spec = ring_spec(8, 2.0, 0.02, None).unwrap();
        let mut beta = vec![0.0; 8];
        beta[0] = 1.0;
        match collapse_feasibility(&spec, &beta, COLLAPSE_TOLERANCE).unwrap() {
            CollapseVerdict::Infeasible { gap } => assert_eq!(gap, 2.0),
            verdict => panic!("expected infeasible, got {verdict:?}"),
        }
    }

    #[test]
    fn uncollapsed_beta_is_rejected() {
        let spec = ring_spec(8, 2.0, 0.02, None).unwrap();
        let beta = vec![0.125; 8];
        assert!(matches!(
            collapse_feasibility(&spec, &beta, COLLAPSE_TOLERANCE),
            Err(FittingError::BetaNotCollapsed)
        ));
    }

    #[test]
    fn two_point_mixture_hand_case() {
        let spec = MixtureSpec::new(vec![
            Component { weight: 0.5, center: [-1.0, 0.0], std: 0.1 },
            Component { weight: 0.5, center: [1.0, 0.0], std: 0.1 },
        ])
        .unwrap();
        match collapse_feasibility(&spec, &[1.0, 0.0], COLLAPSE_TOLERANCE).unwrap() {
            CollapseVerdict::Infeasible { gap } => assert_eq!(gap, 1.0),
            verdict => panic!("expected infeasible, got {verdict:?}"),
        }
    }

    #[test]
    fn symmetric_pair_collapse_is_feasible() {
        // Four components whose top/bottom pair shares the x of the centroid:
        // putting all mass on that pair still matches the global mean.
        let spec = MixtureSpec::new(vec![
            Component { weight: 0.25, center: [0.0, 1.0], std: 0.1 },
            Component { weight: 0.25, center: [0.0, -1.0], std: 0.1 },
            Component { weight: 0.25, center: [1.0, 0.0], std: 0.1 },
            Component { weight: 0.25, center: [-1.0, 0.0], std: 0.1 },
        ])
        .unwrap();
        let verdict = collapse_feasibility(&spec, &[0.5, 0.5, 0.0, 0.0], COLLAPSE_TOLERANCE).unwrap();
        assert_eq!(verdict, CollapseVerdict::Feasible);
    }

    #[test]
    fn bad_betas_are_rejected() {
        let spec = ring_spec(4, 2.0, 0.1, None).unwrap();
        assert!(matches!(
            collapse_feasibility(&spec, &[1.0, 0.0], COLLAPSE_TOLERANCE),
            Err(FittingError::BetaLength { expected: 4, got: 2 })
        ));
        assert!(matches!(
            collapse_feasibility(&spec, &[1.5, -0.5, 0.0, 0.0], COLLAPSE_TOLERANCE),
            Err(FittingError::BetaNegative { index: 1, .. })
        ));
        assert!(matches!(
            collapse_feasibility(&spec, &[0.5, 0.2, 0.0, 0.0], COLLAPSE_TOLERANCE),
            Err(FittingError::BetaSum { .. })
        ));
    }

    proptest! {
        #[test]
        fn penalty_is_non_negative(
            rows in proptest::collection::vec(
                proptest::collection::vec(-5.0_f64..5.0, 2), 2..12),
            mean in proptest::collection::vec(-5.0_f64..5.0, 2),
            std in proptest::collection::vec(0.01_f64..5.0, 2),
        ) {
            let batch = Matrix::from_rows(&rows);
            let target = StatsSnapshot { mean, std, count: None };
            let mut tape = Tape::new();
            let g = tape.leaf(batch, true).unwrap();
            let p = penalty(&mut tape, g, &PenaltyMode::Gdf { target }, STD_EPSILON).unwrap();
            prop_assert!(tape.value(p).get(0, 0) >= 0.0);
        }

        #[test]
        fn penalty_is_translation_equivariant(
            rows in proptest::collection::vec(
                proptest::collection::vec(-5.0_f64..5.0, 2), 2..12),
            mean in proptest::collection::vec(-5.0_f64..5.0, 2),
            std in proptest::collection::vec(0.01_f64..5.0, 2),
            shift in proptest::collection::vec(-3.0_f64..3.0, 2),
        ) {
            let eval = |rows: &[Vec<f64>], target: StatsSnapshot| {
                let mut tape = Tape::new();
                let g = tape.leaf(Matrix::from_rows(rows), true).unwrap();
                let p = penalty(&mut tape, g, &PenaltyMode::Gdf { target }, STD_EPSILON).unwrap();
                tape.value(p).get(0, 0)
            };
            let base = eval(&rows, StatsSnapshot {
                mean: mean.clone(), std: std.clone(), count: None });
            let shifted_rows: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| vec![r[0] + shift[0], r[1] + shift[1]])
                .collect();
            let shifted = eval(&shifted_rows, StatsSnapshot {
                mean: vec![mean[0] + shift[0], mean[1] + shift[1]],
                std,
                count: None,
            });
            prop_assert!((base - shifted).abs() < 1e-9);
        }
    }
}
