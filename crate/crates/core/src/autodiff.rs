//! Reverse-mode automatic differentiation on a flat tape of dense matrices.
//!
//! A `Tape` records every operation as it runs; `backward` replays the tape
//! in reverse and accumulates gradients into the leaves that asked for them.
//! One tape describes one forward pass; build a fresh tape per training step.

use crate::matrix::{matmul, Matrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("empty matrix of shape ({rows}, {cols}) is not a valid node value")]
    EmptyValue { rows: usize, cols: usize },
    #[error("non-finite value passed to {op}")]
    NonFinite { op: &'static str },
    #[error("shape mismatch in {op}: ({a_rows}, {a_cols}) vs ({b_rows}, {b_cols})")]
    ShapeMismatch { op: &'static str, a_rows: usize, a_cols: usize, b_rows: usize, b_cols: usize },
    #[error("{op} requires {requirement}, found {found}")]
    Domain { op: &'static str, requirement: &'static str, found: f64 },
    #[error("std_rows needs at least 2 rows, got {rows}")]
    TooFewRows { rows: usize },
    #[error("backward root must be a 1x1 scalar, got ({rows}, {cols})")]
    NonScalarRoot { rows: usize, cols: usize },
}

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Abs(NodeId),
    Sqrt(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    StdRows(NodeId, f64),
    Clamp(NodeId, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    // True for requires_grad leaves and anything downstream of one; backward
    // skips the rest.
    needs_grad: bool,
}

/// Append-only record of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to this node.
    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// New leaf node holding `value`; gradients flow into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<NodeId, AutodiffError> {
        if value.is_empty() {
            return Err(AutodiffError::EmptyValue { rows: value.rows(), cols: value.cols() });
        }
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let value = matmul(va, vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Broadcast `bias` (1 x n) over every row of `a` (b x n).
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || va.cols() != vb.cols() {
            return Err(shape_err("add_bias", va, vb));
        }
        let mut value = va.clone();
        let brow = vb.row(0).to_vec();
        for i in 0..value.rows() {
            let cols = value.cols();
            let row = &mut value.data_mut()[i * cols..(i + 1) * cols];
            for (v, &b) in row.iter_mut().zip(&brow) {
                *v += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(a, bias), needs))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                requirement: "strictly positive inputs",
                found: *bad,
            });
        }
        let value = self.value(a).map(f64::ln);
        let needs = self.needs(a);
        Ok(self.push(value, Op::Log(a), needs))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| -v);
        let needs = self.needs(a);
        self.push(value, Op::Neg(a), needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        if !c.is_finite() {
            return Err(AutodiffError::NonFinite { op: "scale" });
        }
        let value = self.value(a).map(|v| c * v);
        let needs = self.needs(a);
        Ok(self.push(value, Op::Scale(a, c), needs))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        let needs = self.needs(a);
        self.push(value, Op::Abs(a), needs)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v < 0.0) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                requirement: "non-negative inputs",
                found: *bad,
            });
        }
        let value = self.value(a).map(f64::sqrt);
        let needs = self.needs(a);
        Ok(self.push(value, Op::Sqrt(a), needs))
    }

    /// Column means: (b x n) -> (1 x n).
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::from_vec(1, self.value(a).cols(), self.value(a).col_means());
        let needs = self.needs(a);
        self.push(value, Op::MeanRows(a), needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Matrix::scalar(total), Op::SumAll(a), needs)
    }

    /// Column population standard deviations with `epsilon` inside the sqrt:
    /// (b x n) -> (1 x n), entry j = sqrt(mean((a_ij - mean_j)^2) + epsilon).
    pub fn std_rows(&mut self, a: NodeId, epsilon: f64) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if va.rows() < 2 {
            return Err(AutodiffError::TooFewRows { rows: va.rows() });
        }
        let value = Matrix::from_vec(1, va.cols(), va.col_stds(epsilon));
        let needs = self.needs(a);
        Ok(self.push(value, Op::StdRows(a, epsilon), needs))
    }

    /// Elementwise clamp to [lo, hi]; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, AutodiffError> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(AutodiffError::Domain {
                op: "clamp",
                requirement: "finite lo <= hi",
                found: if lo.is_finite() { hi } else { lo },
            });
        }
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let needs = self.needs(a);
        Ok(self.push(value, Op::Clamp(a, lo, hi), needs))
    }

    /// Accumulate d(root)/d(leaf) into the grad of every requires_grad leaf.
    ///
    /// Call once per tape: grads start at zero on node creation and are not
    /// reset here.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot { rows: shape.0, cols: shape.1 });
        }
        self.nodes[root.0].grad.set(0, 0, 1.0);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Contributions are computed read-only first, then added, so a
            // node feeding several consumers accumulates all of them.
            let contribs = self.parent_contributions(i);
            for (parent, contrib) in contribs {
                self.nodes[parent.0].grad.add_assign(&contrib);
            }
        }
        Ok(())
    }

    fn parent_contributions(&self, i: usize) -> Vec<(NodeId, Matrix)> {
        let node = &self.nodes[i];
        let g = &node.grad;
        let mut out = Vec::new();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    out.push((a, matmul(g, &self.value(b).transposed())));
                }
                if self.needs(b) {
                    out.push((b, matmul(&self.value(a).transposed(), g)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    out.push((a, g.clone()));
                }
                if self.needs(b) {
                    out.push((b, g.clone()));
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(a) {
                    out.push((a, g.clone()));
                }
                if self.needs(bias) {
                    out.push((bias, Matrix::from_vec(1, g.cols(), g.col_sums())));
                }
            }
            Op::Relu(a) => {
                if self.needs(a) {
                    out.push((a, zip_map(g, self.value(a), |gv, av| if av > 0.0 { gv } else { 0.0 })));
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(a) {
                    out.push((a, zip_map(g, &node.value, |gv, s| gv * s * (1.0 - s))));
                }
            }
            Op::Log(a) => {
                if self.needs(a) {
                    out.push((a, zip_map(g, self.value(a), |gv, av| gv / av)));
                }
            }
            Op::Neg(a) => {
                if self.needs(a) {
                    out.push((a, g.map(|v| -v)));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(a) {
                    out.push((a, g.map(|v| c * v)));
                }
            }
            Op::Abs(a) => {
                if self.needs(a) {
                    out.push((a, zip_map(g, self.value(a), |gv, av| gv * sign_or_zero(av))));
                }
            }
            Op::Sqrt(a) => {
                if self.needs(a) {
                    out.push((a, zip_map(g, &node.value, |gv, s| gv / (2.0 * s))));
                }
            }
            Op::MeanRows(a) => {
                if self.needs(a) {
                    let va = self.value(a);
                    let scale = 1.0 / va.rows() as f64;
                    let mut m = Matrix::zeros(va.rows(), va.cols());
                    for i in 0..va.rows() {
                        let cols = va.cols();
                        let row = &mut m.data_mut()[i * cols..(i + 1) * cols];
                        for (mv, &gv) in row.iter_mut().zip(g.row(0)) {
                            *mv = gv * scale;
                        }
                    }
                    out.push((a, m));
                }
            }
            Op::SumAll(a) => {
                if self.needs(a) {
                    let va = self.value(a);
                    let gv = g.get(0, 0);
                    out.push((a, Matrix::from_vec(va.rows(), va.cols(), vec![gv; va.len()])));
                }
            }
            Op::StdRows(a, _eps) => {
                if self.needs(a) {
                    // out_j = sqrt(var_j + eps), so d out_j / d a_ij =
                    // (a_ij - mean_j) / (b * out_j); the mean's own
                    // dependence on a_ij cancels against the centered sum.
                    let va = self.value(a);
                    let means = va.col_means();
                    let b = va.rows() as f64;
                    let mut m = Matrix::zeros(va.rows(), va.cols());
                    for i in 0..va.rows() {
                        let cols = va.cols();
                        let row = &mut m.data_mut()[i * cols..(i + 1) * cols];
                        for (j, mv) in row.iter_mut().enumerate() {
                            let centered = va.get(i, j) - means[j];
                            *mv = g.get(0, j) * centered / (b * node.value.get(0, j));
                        }
                    }
                    out.push((a, m));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(a) {
                    out.push((a, zip_map(g, self.value(a), |gv, av| {
                        if av > lo && av < hi {
                            gv
                        } else {
                            0.0
                        }
                    })));
                }
            }
        }
        out
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        a_rows: a.rows(),
        a_cols: a.cols(),
        b_rows: b.rows(),
        b_cols: b.cols(),
    }
}

fn zip_map(g: &Matrix, v: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = g.data().iter().zip(v.data()).map(|(&gv, &vv)| f(gv, vv)).collect();
    Matrix::from_vec(g.rows(), g.cols(), data)
}

fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn leaf_rejects_bad_values() {
        let mut t = Tape::new();
        assert!(matches!(
            t.leaf(Matrix::zeros(0, 3), true),
            Err(AutodiffError::EmptyValue { .. })
        ));
        assert!(matches!(
            t.leaf(m(&[vec![f64::NAN]]), true),
            Err(AutodiffError::NonFinite { .. })
        ));
    }

    #[test]
    fn elementwise_forward_values() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![-1.0, 2.0]]), false).unwrap();
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);
        let z = t.leaf(m(&[vec![0.0]]), false).unwrap();
        let sg = t.sigmoid(z);
        assert_eq!(t.value(sg).data(), &[0.5]);
        let a = t.leaf(m(&[vec![1.0, 3.0], vec![3.0, 5.0]]), false).unwrap();
        let mr = t.mean_rows(a);
        assert_eq!(t.value(mr).data(), &[2.0, 4.0]);
    }

    #[test]
    fn std_rows_matches_two_point_case() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[vec![0.0], vec![2.0]]), false).unwrap();
        let s = t.std_rows(a, 0.0).unwrap();
        assert_eq!(t.value(s).data(), &[1.0]);

        let c = t.leaf(m(&[vec![7.0], vec![7.0], vec![7.0]]), false).unwrap();
        let sc = t.std_rows(c, 1e-8).unwrap();
        assert!((t.value(sc).get(0, 0) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn std_rows_needs_two_rows() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[vec![1.0, 2.0]]), false).unwrap();
        assert!(matches!(t.std_rows(a, 0.0), Err(AutodiffError::TooFewRows { rows: 1 })));
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[vec![0.5, 0.0]]), false).unwrap();
        assert!(matches!(t.log(a), Err(AutodiffError::Domain { op: "log", .. })));
    }

    #[test]
    fn backward_linear_map_gives_constant_grads() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]), true).unwrap();
        let s = t.scale(x, 3.0).unwrap();
        let root = t.sum_all(s);
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).data(), &[3.0; 4]);
    }

    #[test]
    fn backward_accumulates_across_consumers() {
        // Diamond: root = sum(x + x); gradient of each entry is 2.
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, -2.0]]), true).unwrap();
        let s = t.add(x, x).unwrap();
        let root = t.sum_all(s);
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, 2.0]]), true).unwrap();
        assert!(matches!(t.backward(x), Err(AutodiffError::NonScalarRoot { .. })));
    }

    #[test]
    fn no_grad_leaf_stays_zero() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0]]), true).unwrap();
        let c = t.leaf(m(&[vec![5.0]]), false).unwrap();
        let p = t.add(x, c).unwrap();
        let root = t.sum_all(p);
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).data(), &[1.0]);
        assert_eq!(t.grad(c).data(), &[0.0]);
    }
}
