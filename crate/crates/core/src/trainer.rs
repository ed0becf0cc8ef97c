//! Alternating adversarial training for a generator/discriminator pair on a
//! 2D mixture, with an optional distribution-fitting penalty on the
//! generator objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::fitting::{self, FittingError, PenaltyMode, RunningStats, StatsSnapshot, STD_EPSILON};
use crate::matrix::Matrix;
use crate::mixture::{self, MixtureSpec};
use crate::nn::{self, AdamState, MlpSpec, NnError, OutputActivation, Params};

/// Discriminator outputs are clamped to [delta, 1-delta] before any log.
pub const LOG_CLAMP: f64 = 1e-7;

pub const DEFAULT_SNAPSHOT_EVERY: usize = 500;
pub const DEFAULT_SNAPSHOT_DUMP: usize = 512;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch size must be at least 2, got {got}")]
    BadBatchSize { got: usize },
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("{what} must be positive and finite, got {got}")]
    BadRate { what: &'static str, got: f64 },
    #[error("penalty weight must be non-negative and finite, got {got}")]
    BadLambda { got: f64 },
    #[error("noise_dim {noise_dim} does not match the generator input {input}")]
    NoiseDimMismatch { noise_dim: usize, input: usize },
    #[error("generator outputs {out} columns but the discriminator reads {input}")]
    WidthMismatch { out: usize, input: usize },
    #[error("discriminator must end in a single sigmoid output")]
    BadDiscriminatorHead,
    #[error("snapshot stride and dump size must be at least 1")]
    BadSnapshotConfig,
    #[error("d_steps_per_g_step must be at least 1")]
    BadDSteps,
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("at iteration {iteration}: {source}")]
    Step { iteration: usize, source: Box<TrainError> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fitting(#[from] FittingError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which penalty the generator trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    Gdf,
    Ldf,
}

/// Where the fixed target statistics come from when the penalty is `Gdf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdfStatsSource {
    /// Exact mixture statistics.
    ClosedForm,
    /// One pass over a freshly sampled dataset before training.
    DatasetPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLossKind {
    /// -mean(log D(G(z))): the standard practical generator objective.
    NonSaturating,
    /// +mean(log(1 - D(G(z)))): the literal minimax objective.
    Saturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub generator: MlpSpec,
    pub discriminator: MlpSpec,
    pub noise_dim: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub penalty: PenaltyKind,
    pub gdf_source: GdfStatsSource,
    /// Dataset size for the pre-training statistics pass.
    pub gdf_dataset_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub snapshot_every: usize,
    pub snapshot_dump: usize,
    pub d_steps_per_g_step: usize,
    pub generator_loss: GeneratorLossKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: MlpSpec {
                layer_sizes: vec![256, 128, 128, 2],
                output_activation: OutputActivation::None,
            },
            discriminator: MlpSpec {
                layer_sizes: vec![2, 128, 128, 1],
                output_activation: OutputActivation::Sigmoid,
            },
            noise_dim: 256,
            lr_g: 0.001,
            lr_d: 0.0001,
            batch_size: 512,
            iterations: 5000,
            penalty: PenaltyKind::None,
            gdf_source: GdfStatsSource::ClosedForm,
            gdf_dataset_size: 100_000,
            lambda: 1.0,
            seed: 0,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            snapshot_dump: DEFAULT_SNAPSHOT_DUMP,
            d_steps_per_g_step: 1,
            generator_loss: GeneratorLossKind::NonSaturating,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.batch_size < 2 {
            return Err(TrainError::BadBatchSize { got: self.batch_size });
        }
        if self.iterations == 0 {
            return Err(TrainError::NoIterations);
        }
        for (what, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrainError::BadRate { what, got: v });
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(TrainError::BadLambda { got: self.lambda });
        }
        if self.noise_dim != self.generator.input_size() {
            return Err(TrainError::NoiseDimMismatch {
                noise_dim: self.noise_dim,
                input: self.generator.input_size(),
            });
        }
        if self.generator.output_size() != self.discriminator.input_size() {
            return Err(TrainError::WidthMismatch {
                out: self.generator.output_size(),
                input: self.discriminator.input_size(),
            });
        }
        if self.discriminator.output_size() != 1
            || self.discriminator.output_activation != OutputActivation::Sigmoid
        {
            return Err(TrainError::BadDiscriminatorHead);
        }
        if self.snapshot_every == 0 || self.snapshot_dump == 0 {
            return Err(TrainError::BadSnapshotConfig);
        }
        if self.d_steps_per_g_step == 0 {
            return Err(TrainError::BadDSteps);
        }
        Ok(())
    }
}

/// Discriminator loss: -mean(log d_real) - mean(log(1 - d_fake)), with both
/// outputs clamped away from 0 and 1.
pub fn d_loss(tape: &mut Tape, d_real: NodeId, d_fake: NodeId) -> Result<NodeId, TrainError> {
    let real_c = tape.clamp(d_real, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let real_log = tape.log(real_c)?;
    let real_mean = tape.mean_rows(real_log);

    let fake_flipped = one_minus(tape, d_fake)?;
    let fake_log = tape.log(fake_flipped)?;
    let fake_mean = tape.mean_rows(fake_log);

    let total = tape.add(real_mean, fake_mean)?;
    Ok(tape.neg(total))
}

/// Generator loss: the adversarial term plus lambda times the fitting
/// penalty on the generated batch.
pub fn g_loss(
    tape: &mut Tape,
    d_fake: NodeId,
    generated: NodeId,
    mode: &PenaltyMode,
    lambda: f64,
    kind: GeneratorLossKind,
) -> Result<NodeId, TrainError> {
    Ok(g_loss_parts(tape, d_fake, generated, mode, lambda, kind)?.0)
}

/// Same graph as `g_loss`, also handing back the unweighted penalty node so
/// callers can report its value.
fn g_loss_parts(
    tape: &mut Tape,
    d_fake: NodeId,
    generated: NodeId,
    mode: &PenaltyMode,
    lambda: f64,
    kind: GeneratorLossKind,
) -> Result<(NodeId, NodeId), TrainError> {
    let adversarial = match kind {
        GeneratorLossKind::NonSaturating => {
            let fake_c = tape.clamp(d_fake, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
            let fake_log = tape.log(fake_c)?;
            let fake_mean = tape.mean_rows(fake_log);
            tape.neg(fake_mean)
        }
        GeneratorLossKind::Saturating => {
            let flipped = one_minus(tape, d_fake)?;
            let fake_log = tape.log(flipped)?;
            tape.mean_rows(fake_log)
        }
    };
    let raw_penalty = fitting::penalty(tape, generated, mode, STD_EPSILON)?;
    let weighted = tape.scale(raw_penalty, lambda)?;
    let loss = tape.add(adversarial, weighted)?;
    Ok((loss, raw_penalty))
}

/// clamp to [delta, 1-delta], then 1 - x.
fn one_minus(tape: &mut Tape, x: NodeId) -> Result<NodeId, TrainError> {
    let clamped = tape.clamp(x, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let (rows, cols) = tape.shape(clamped);
    let ones = tape.leaf(Matrix::from_vec(rows, cols, vec![1.0; rows * cols]), false)?;
    let negated = tape.neg(clamped);
    Ok(tape.add(ones, negated)?)
}

/// Scalars and a generated dump captured at one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRecord {
    pub iteration: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub penalty: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub samples: Matrix,
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config: TrainConfig,
    pub snapshots: Vec<SnapshotRecord>,
    pub generator: Params,
    pub discriminator: Params,
    /// Fixed target used by the GDF penalty, when one was computed.
    pub gdf_target: Option<StatsSnapshot>,
    /// Final running statistics of the LDF accumulator, when used.
    pub ldf_stats: Option<StatsSnapshot>,
}

/// Standard-normal noise batch for the generator.
pub fn sample_noise<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Matrix {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, dim, data)
}

/// Forward `count` generator samples without touching gradients, in chunks
/// so huge dumps stay memory friendly.
pub fn generate<R: Rng>(
    spec: &MlpSpec,
    params: &Params,
    count: usize,
    rng: &mut R,
) -> Result<Matrix, TrainError> {
    let dim = spec.input_size();
    let mut out = Matrix::zeros(count, spec.output_size());
    let mut done = 0;
    while done < count {
        let chunk = (count - done).min(4096);
        let mut tape = Tape::new();
        let noise = tape.leaf(sample_noise(rng, chunk, dim), false)?;
        let nodes = params.register(&mut tape, false)?;
        let y = nn::forward(&mut tape, spec, &nodes, noise)?;
        let value = tape.value(y);
        let cols = value.cols();
        out.data_mut()[done * cols..(done + chunk) * cols].copy_from_slice(value.data());
        done += chunk;
    }
    Ok(out)
}

struct StepOutcome {
    loss: f64,
    d_real_mean: f64,
    d_fake_mean: f64,
    penalty: f64,
}

/// Run the full adversarial loop. Deterministic for a given (config, spec):
/// one ChaCha stream drives initialization, batches, and noise in a fixed
/// order.
pub fn train(config: &TrainConfig, spec: &MixtureSpec) -> Result<RunLog, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut g_params = nn::init_params(&config.generator, &mut rng)?;
    let mut d_params = nn::init_params(&config.discriminator, &mut rng)?;
    let mut adam_g = AdamState::new(
        config.lr_g,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
        &g_params,
    );
    let mut adam_d = AdamState::new(
        config.lr_d,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
        &d_params,
    );

    let gdf_target = match config.penalty {
        PenaltyKind::Gdf => Some(match config.gdf_source {
            GdfStatsSource::ClosedForm => mixture::closed_form_stats(spec),
            GdfStatsSource::DatasetPass => {
                let draw = mixture::sample(spec, config.gdf_dataset_size.max(2), &mut rng);
                mixture::dataset_pass_stats(&draw.samples)
                    .expect("dataset pass has at least 2 rows")
            }
        }),
        _ => None,
    };
    let mut ldf_acc =
        (config.penalty == PenaltyKind::Ldf).then(|| RunningStats::new(spec.components()[0].center.len()));

    let mut snapshots = Vec::new();
    for iteration in 0..config.iterations {
        let wrap =
            |source: TrainError| TrainError::Step { iteration, source: Box::new(source) };

        let mut d_outcome = None;
        for _ in 0..config.d_steps_per_g_step {
            let real = mixture::sample(spec, config.batch_size, &mut rng);
            if let Some(acc) = ldf_acc.as_mut() {
                acc.update(&real.samples).map_err(|e| wrap(e.into()))?;
            }
            let noise = sample_noise(&mut rng, config.batch_size, config.noise_dim);
            d_outcome = Some(
                discriminator_step(
                    config,
                    &mut g_params,
                    &mut d_params,
                    &mut adam_d,
                    real.samples,
                    noise,
                )
                .map_err(|e| wrap(e))?,
            );
        }
        let d_outcome = d_outcome.expect("at least one discriminator step");

        let mode = match config.penalty {
            PenaltyKind::None => PenaltyMode::None,
            PenaltyKind::Gdf => {
                PenaltyMode::Gdf { target: gdf_target.clone().expect("target computed") }
            }
            PenaltyKind::Ldf => {
                PenaltyMode::Ldf { accumulator: ldf_acc.clone().expect("accumulator present") }
            }
        };
        let noise = sample_noise(&mut rng, config.batch_size, config.noise_dim);
        let g_outcome =
            generator_step(config, &mut g_params, &d_params, &mut adam_g, noise, &mode)
                .map_err(|e| wrap(e))?;

        if !d_outcome.loss.is_finite() || !g_outcome.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration });
        }

        if iteration % config.snapshot_every == 0 || iteration + 1 == config.iterations {
            let samples =
                generate(&config.generator, &g_params, config.snapshot_dump, &mut rng)
                    .map_err(|e| wrap(e))?;
            if !samples.is_finite() {
                return Err(TrainError::NonFiniteLoss { iteration });
            }
            snapshots.push(SnapshotRecord {
                iteration,
                loss_d: d_outcome.loss,
                loss_g: g_outcome.loss,
                penalty: g_outcome.penalty,
                d_real_mean: d_outcome.d_real_mean,
                d_fake_mean: d_outcome.d_fake_mean,
                samples,
            });
        }
    }

    let ldf_stats = match &ldf_acc {
        Some(acc) => Some(acc.snapshot()?),
        None => None,
    };
    Ok(RunLog {
        config: config.clone(),
        snapshots,
        generator: g_params,
        discriminator: d_params,
        gdf_target,
        ldf_stats,
    })
}

fn discriminator_step(
    config: &TrainConfig,
    g_params: &mut Params,
    d_params: &mut Params,
    adam_d: &mut AdamState,
    real: Matrix,
    noise: Matrix,
) -> Result<StepOutcome, TrainError> {
    let mut tape = Tape::new();
    // Generator runs frozen here: its branch never enters the backward pass.
    let noise_leaf = tape.leaf(noise, false)?;
    let g_nodes = g_params.register(&mut tape, false)?;
    let fake = nn::forward(&mut tape, &config.generator, &g_nodes, noise_leaf)?;

    let d_nodes = d_params.register(&mut tape, true)?;
    let real_leaf = tape.leaf(real, false)?;
    let d_real = nn::forward(&mut tape, &config.discriminator, &d_nodes, real_leaf)?;
    let d_fake = nn::forward(&mut tape, &config.discriminator, &d_nodes, fake)?;

    let loss = d_loss(&mut tape, d_real, d_fake)?;
    tape.backward(loss)?;
    let grads = d_nodes.gradients(&tape);
    adam_d.step(d_params, grads)?;

    Ok(StepOutcome {
        loss: tape.value(loss).get(0, 0),
        d_real_mean: mean_of(tape.value(d_real)),
        d_fake_mean: mean_of(tape.value(d_fake)),
        penalty: 0.0,
    })
}

fn generator_step(
    config: &TrainConfig,
    g_params: &mut Params,
    d_params: &Params,
    adam_g: &mut AdamState,
    noise: Matrix,
    mode: &PenaltyMode,
) -> Result<StepOutcome, TrainError> {
    let mut tape = Tape::new();
    let noise_leaf = tape.leaf(noise, false)?;
    let g_nodes = g_params.register(&mut tape, true)?;
    let fake = nn::forward(&mut tape, &config.generator, &g_nodes, noise_leaf)?;

    // Discriminator frozen: gradients flow through it into the generator
    // but its own parameters are left alone.
    let d_nodes = d_params.register(&mut tape, false)?;
    let d_fake = nn::forward(&mut tape, &config.discriminator, &d_nodes, fake)?;

    let (loss, penalty_node) =
        g_loss_parts(&mut tape, d_fake, fake, mode, config.lambda, config.generator_loss)?;
    tape.backward(loss)?;
    let grads = g_nodes.gradients(&tape);
    adam_g.step(g_params, grads)?;

    Ok(StepOutcome {
        loss: tape.value(loss).get(0, 0),
        d_real_mean: 0.0,
        d_fake_mean: mean_of(tape.value(d_fake)),
        penalty: tape.value(penalty_node).get(0, 0),
    })
}

fn mean_of(m: &Matrix) -> f64 {
    m.data().iter().sum::<f64>() / m.len() as f64
}
