//! Weighted mixtures of isotropic 2D Gaussians: ring construction, seeded
//! sampling, exact density, and global mean/std in closed form.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::StatsSnapshot;
use crate::matrix::Matrix;
use crate::sums::{exact_sum, ExactSum};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("mixture needs at least one component")]
    NoComponents,
    #[error("component {index} has non-positive std {std}")]
    BadStd { index: usize, std: f64 },
    #[error("component {index} has weight {weight}, expected a value in (0, 1]")]
    BadWeight { index: usize, weight: f64 },
    #[error("component weights sum to {sum}, expected 1")]
    BadWeightSum { sum: f64 },
    #[error("ring radius must be positive, got {radius}")]
    BadRadius { radius: f64 },
    #[error("expected {expected} weights for the ring, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("statistics need at least 2 samples, got {rows}")]
    TooFewSamples { rows: usize },
}

/// One isotropic Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub center: [f64; 2],
    pub std: f64,
}

/// A validated weighted mixture; weights are positive and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Component>", into = "Vec<Component>")]
pub struct MixtureSpec {
    components: Vec<Component>,
}

impl TryFrom<Vec<Component>> for MixtureSpec {
    type Error = MixtureError;

    fn try_from(components: Vec<Component>) -> Result<Self, MixtureError> {
        MixtureSpec::new(components)
    }
}

impl From<MixtureSpec> for Vec<Component> {
    fn from(spec: MixtureSpec) -> Self {
        spec.components
    }
}

impl MixtureSpec {
    pub fn new(components: Vec<Component>) -> Result<Self, MixtureError> {
        if components.is_empty() {
            return Err(MixtureError::NoComponents);
        }
        for (index, c) in components.iter().enumerate() {
            if !(c.std > 0.0) || !c.std.is_finite() {
                return Err(MixtureError::BadStd { index, std: c.std });
            }
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(MixtureError::BadWeight { index, weight: c.weight });
            }
        }
        let sum = exact_sum(components.iter().map(|c| c.weight));
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(MixtureError::BadWeightSum { sum });
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Draw one component index by walking the cumulative weights.
    pub fn sample_label<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return k;
            }
        }
        self.components.len() - 1
    }
}

/// A batch of mixture samples along with the component each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraw {
    pub samples: Matrix,
    pub component_labels: Vec<usize>,
}

/// `k` equally spaced centers on a circle of the given radius, first at
/// (radius, 0). Uniform weights unless overridden.
///
/// For even `k` the second half of the centers is the exact negation of the
/// first half, so uniformly weighted rings have an exactly-zero centroid.
pub fn ring_spec(
    k: usize,
    radius: f64,
    component_std: f64,
    weights: Option<&[f64]>,
) -> Result<MixtureSpec, MixtureError> {
    if k == 0 {
        return Err(MixtureError::NoComponents);
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(MixtureError::BadRadius { radius });
    }
    if let Some(w) = weights {
        if w.len() != k {
            return Err(MixtureError::WeightCount { expected: k, got: w.len() });
        }
    }
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(k);
    for i in 0..k {
        if k % 2 == 0 && i >= k / 2 {
            let [x, y] = centers[i - k / 2];
            centers.push([-x, -y]);
        } else {
            let theta = TAU * i as f64 / k as f64;
            centers.push([radius * theta.cos(), radius * theta.sin()]);
        }
    }
    let uniform = 1.0 / k as f64;
    let components = centers
        .into_iter()
        .enumerate()
        .map(|(i, center)| Component {
            weight: weights.map_or(uniform, |w| w[i]),
            center,
            std: component_std,
        })
        .collect();
    MixtureSpec::new(components)
}

/// Draw `b` rows: a component per row by weight, then an isotropic Gaussian
/// around its center.
pub fn sample<R: Rng>(spec: &MixtureSpec, b: usize, rng: &mut R) -> BatchDraw {
    assert!(b >= 1, "sample needs at least one row");
    let mut data = Vec::with_capacity(b * 2);
    let mut labels = Vec::with_capacity(b);
    for _ in 0..b {
        let k = spec.sample_label(rng);
        let c = &spec.components[k];
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        data.push(c.center[0] + c.std * z0);
        data.push(c.center[1] + c.std * z1);
        labels.push(k);
    }
    BatchDraw { samples: Matrix::from_vec(b, 2, data), component_labels: labels }
}

/// Mixture density at `x`.
pub fn density(spec: &MixtureSpec, x: [f64; 2]) -> f64 {
    spec.components
        .iter()
        .map(|c| {
            let dx = x[0] - c.center[0];
            let dy = x[1] - c.center[1];
            let var = c.std * c.std;
            c.weight * (-(dx * dx + dy * dy) / (2.0 * var)).exp() / (2.0 * PI * var)
        })
        .sum()
}

/// Per-dimension mean and population std of the whole mixture, analytically:
/// mean = sum of weight*center, variance = sum of weight*(std^2 + (center-mean)^2).
pub fn closed_form_stats(spec: &MixtureSpec) -> StatsSnapshot {
    let mut mean = [0.0; 2];
    let mut std = [0.0; 2];
    for d in 0..2 {
        mean[d] = exact_sum(spec.components.iter().map(|c| c.weight * c.center[d]));
    }
    for d in 0..2 {
        let var = exact_sum(spec.components.iter().map(|c| {
            let offset = c.center[d] - mean[d];
            c.weight * (c.std * c.std + offset * offset)
        }));
        std[d] = var.max(0.0).sqrt();
    }
    StatsSnapshot { mean: mean.to_vec(), std: std.to_vec(), count: None }
}

/// Per-dimension population mean and std over every row of `samples`.
///
/// Sums are exactly rounded, so statistics are invariant under duplicating
/// the dataset.
pub fn dataset_pass_stats(samples: &Matrix) -> Result<StatsSnapshot, MixtureError> {
    let n = samples.rows();
    if n < 2 {
        return Err(MixtureError::TooFewSamples { rows: n });
    }
    let cols = samples.cols();
    let mut sums = vec![ExactSum::new(); cols];
    let mut sq_sums = vec![ExactSum::new(); cols];
    for i in 0..n {
        for (j, &v) in samples.row(i).iter().enumerate() {
            sums[j].add(v);
            sq_sums[j].add(v * v);
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sums.iter().map(|s| s.value() / nf).collect();
    let std = sq_sums
        .iter()
        .zip(&mean)
        .map(|(sq, &m)| (sq.value() / nf - m * m).max(0.0).sqrt())
        .collect();
    Ok(StatsSnapshot { mean, std, count: Some(n as u64) })
}
