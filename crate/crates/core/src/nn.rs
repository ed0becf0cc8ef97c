//! Multilayer perceptrons with ReLU hidden layers, Glorot initialization,
//! the Adam optimizer, and JSON checkpoints.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::matrix::Matrix;
use crate::report::write_json_atomic;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("mlp spec needs at least two layer sizes, got {got}")]
    TooFewLayers { got: usize },
    #[error("mlp layer sizes must be positive")]
    ZeroLayerSize,
    #[error("input has {got} columns, first layer expects {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("gradient shape mismatch for parameter {name}")]
    GradShape { name: String },
    #[error("checkpoint schema version {got}, this build reads {expected}")]
    SchemaVersion { got: u32, expected: u32 },
    #[error("checkpoint parameter {name} does not match its spec shape")]
    CheckpointShape { name: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Sigmoid,
}

/// Fully connected network shape: `layer_sizes[0]` inputs through to
/// `layer_sizes.last()` outputs. Hidden layers always use ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output_activation: OutputActivation) -> Result<Self, NnError> {
        let spec = Self { layer_sizes, output_activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::TooFewLayers { got: self.layer_sizes.len() });
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(NnError::ZeroLayerSize);
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    /// (n_in, n_out) for each affine layer in order.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }
}

/// One affine layer: weight is (n_in x n_out), bias a (1 x n_out) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// All trainable values of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<Layer>,
}

/// Glorot-uniform weights (|w| <= sqrt(6/(n_in+n_out))), zero biases.
pub fn init_params<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Result<Params, NnError> {
    spec.validate()?;
    let mut layers = Vec::new();
    for (n_in, n_out) in spec.layer_shapes() {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let data = (0..n_in * n_out)
            .map(|_| (2.0 * rng.random::<f64>() - 1.0) * limit)
            .collect();
        layers.push(Layer {
            weight: Matrix::from_vec(n_in, n_out, data),
            bias: Matrix::zeros(1, n_out),
        });
    }
    Ok(Params { layers })
}

/// Tape handles for one network's parameters within one forward pass.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl Params {
    /// Copy every parameter onto the tape as a leaf. Pass
    /// `requires_grad = false` to run the network frozen (for example the
    /// discriminator during a generator step).
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Result<ParamNodes, NnError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.leaf(layer.weight.clone(), requires_grad)?;
            let b = tape.leaf(layer.bias.clone(), requires_grad)?;
            layers.push((w, b));
        }
        Ok(ParamNodes { layers })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

impl ParamNodes {
    /// Tape ids in parameter order: weight then bias, layer by layer.
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Clone the accumulated gradients off the tape, in parameter order.
    pub fn gradients(&self, tape: &Tape) -> Gradients {
        let layers = self
            .layers
            .iter()
            .map(|&(w, b)| Layer { weight: tape.grad(w).clone(), bias: tape.grad(b).clone() })
            .collect();
        Gradients { layers }
    }
}

/// Loss gradients mirroring the `Params` layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

/// Run the network: alternating affine layers and ReLU, with the configured
/// output activation on the last layer.
pub fn forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    nodes: &ParamNodes,
    input: NodeId,
) -> Result<NodeId, NnError> {
    let got = tape.shape(input).1;
    if got != spec.input_size() {
        return Err(NnError::InputWidth { got, expected: spec.input_size() });
    }
    let mut x = input;
    let last = nodes.layers.len() - 1;
    for (i, &(w, b)) in nodes.layers.iter().enumerate() {
        let lin = tape.matmul(x, w)?;
        x = tape.add_bias(lin, b)?;
        if i < last {
            x = tape.relu(x);
        } else if spec.output_activation == OutputActivation::Sigmoid {
            x = tape.sigmoid(x);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

impl Moments {
    fn zeros_like(p: &Matrix) -> Self {
        Self { m: Matrix::zeros(p.rows(), p.cols()), v: Matrix::zeros(p.rows(), p.cols()) }
    }
}

/// Adam with bias correction. Moments live here, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
    layers: Vec<(Moments, Moments)>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64, params: &Params) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| (Moments::zeros_like(&l.weight), Moments::zeros_like(&l.bias)))
            .collect();
        Self { lr, beta1, beta2, epsilon, t: 0, layers }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update in place. Consumes the gradients; rejects
    /// non-finite ones (naming the parameter) before touching any value.
    pub fn step(&mut self, params: &mut Params, grads: Gradients) -> Result<(), NnError> {
        if grads.layers.len() != params.layers.len() {
            return Err(NnError::GradShape { name: "layer count".into() });
        }
        for (i, (g, p)) in grads.layers.iter().zip(&params.layers).enumerate() {
            for (part, gm, pm) in
                [("weight", &g.weight, &p.weight), ("bias", &g.bias, &p.bias)]
            {
                let name = || format!("layer{i}.{part}");
                if gm.shape() != pm.shape() {
                    return Err(NnError::GradShape { name: name() });
                }
                if !gm.is_finite() {
                    return Err(NnError::NonFiniteGradient { name: name() });
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let hyper = (self.lr, self.beta1, self.beta2, self.epsilon);
        for (layer, (grad, moments)) in
            params.layers.iter_mut().zip(grads.layers.iter().zip(self.layers.iter_mut()))
        {
            apply_adam(hyper, &mut layer.weight, &grad.weight, &mut moments.0, bc1, bc2);
            apply_adam(hyper, &mut layer.bias, &grad.bias, &mut moments.1, bc1, bc2);
        }
        Ok(())
    }
}

fn apply_adam(
    (lr, b1, b2, eps): (f64, f64, f64, f64),
    p: &mut Matrix,
    g: &Matrix,
    mom: &mut Moments,
    bc1: f64,
    bc2: f64,
) {
    for (((pv, &gv), mv), vv) in
        p.data_mut().iter_mut().zip(g.data()).zip(mom.m.data_mut()).zip(mom.v.data_mut())
    {
        *mv = b1 * *mv + (1.0 - b1) * gv;
        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
        let m_hat = *mv / bc1;
        let v_hat = *vv / bc2;
        *pv -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Versioned parameter checkpoint: shape spec, the seed and step that
/// produced it, and every layer's values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub spec: MlpSpec,
    pub seed: u64,
    pub step: u64,
    pub params: Params,
}

impl Checkpoint {
    pub fn new(spec: MlpSpec, seed: u64, step: u64, params: Params) -> Self {
        Self { schema_version: CHECKPOINT_SCHEMA_VERSION, spec, seed, step, params }
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        Ok(write_json_atomic(path, self)?)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(NnError::SchemaVersion {
                got: ckpt.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        ckpt.spec.validate()?;
        let expected: Vec<_> = ckpt.spec.layer_shapes().collect();
        if ckpt.params.layers.len() != expected.len() {
            return Err(NnError::CheckpointShape { name: "layer count".into() });
        }
        for (i, (layer, &(n_in, n_out))) in ckpt.params.layers.iter().zip(&expected).enumerate() {
            if layer.weight.shape() != (n_in, n_out) || layer.bias.shape() != (1, n_out) {
                return Err(NnError::CheckpointShape { name: format!("layer{i}") });
            }
        }
        Ok(ckpt)
    }
}
