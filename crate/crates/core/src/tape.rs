//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is topologically sorted by construction
//! and [`Tape::backward`] is a single reverse sweep that visits each node once.
//!
//! ```
//! use otlab::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let root = tape.sum(sq).unwrap();
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Only nodes derived from a [`Tape::variable`] carry gradients; everything
//! built purely from constants is skipped during the backward sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Margin {
        logits: NodeId,
        labels: Vec<usize>,
        /// Runner-up class per row, or `None` where the hinge is inactive.
        rival: Vec<Option<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise binary operations accept equal shapes or a scalar on either side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.is_scalar() {
        Ok(Broadcast::LeftScalar)
    } else if b.is_scalar() {
        Ok(Broadcast::RightScalar)
    } else {
        Err(Error::dim(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn apply_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    match broadcast(a, b)? {
        Broadcast::Same => a.zip_map(b, f),
        Broadcast::LeftScalar => {
            let s = a.data()[0];
            Ok(b.map(|v| f(s, v)))
        }
        Broadcast::RightScalar => {
            let s = b.data()[0];
            Ok(a.map(|v| f(v, s)))
        }
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// Gradient of the root with respect to `node`. Present for every node
    /// that depends on a variable; unreachable variables get zeros.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.grads.get_mut(node.0).and_then(Option::take)
    }
}

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

    /// Records a differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn requires(&self, node: NodeId) -> bool {
        self.nodes[node.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId], name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&i| self.requires(i));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = gemm(self.value(a), false, self.value(b), false)?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = apply_binary(self.value(a), self.value(b), |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = apply_binary(self.value(a), self.value(b), |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = apply_binary(self.value(a), self.value(b), |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c), &[a], "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(a), &[a], "relu")
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a, slope), &[a], "leaky_relu")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a], "tanh")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a], "sum")
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(a), &[a], "mean")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        check_labels(z, labels)?;
        let (n, m) = (z.rows(), z.cols());
        let mut probs = Vec::with_capacity(n * m);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            total += denom.ln() - (row[label] - max);
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let probs = Tensor::matrix(n, m, probs)?;
        let value = Tensor::scalar(total / n as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(value, op, &[logits], "softmax_cross_entropy")
    }

    /// Per-row hinge `max(z[label] - max_{j != label} z[j] + kappa, 0)` as an
    /// `[n, 1]` column. Zero once the row is misclassified by margin `kappa`.
    pub fn margin_loss(&mut self, logits: NodeId, labels: &[usize], kappa: f64) -> Result<NodeId> {
        let z = self.value(logits);
        check_labels(z, labels)?;
        if z.cols() < 2 {
            return Err(Error::dim("margin loss needs at least two classes"));
        }
        let n = z.rows();
        let mut out = Vec::with_capacity(n);
        let mut rival = Vec::with_capacity(n);
        for (i, &label) in labels.iter().enumerate() {
            let row = z.row(i);
            let (best_other, _) = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != label)
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, (j, &v)| {
                    if v > acc.1 {
                        (j, v)
                    } else {
                        acc
                    }
                });
            let hinge = row[label] - row[best_other] + kappa;
            if hinge > 0.0 {
                out.push(hinge);
                rival.push(Some(best_other));
            } else {
                out.push(0.0);
                rival.push(None);
            }
        }
        let value = Tensor::matrix(n, 1, out)?;
        let op = Op::Margin {
            logits,
            labels: labels.to_vec(),
            rival,
        };
        self.push(value, op, &[logits], "margin_loss")
    }

    /// Gradients of the scalar `root` with respect to every node that depends
    /// on a variable.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        if !self.value(root).is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.requires(root) {
            grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        grads.resize(self.nodes.len(), None);
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros_like(&node.value));
            }
        }
        Ok(GradientMap { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let ga = gemm(g, false, self.value(*b), true)?;
                    accumulate(grads, *a, ga);
                }
                if self.requires(*b) {
                    let gb = gemm(self.value(*a), true, g, false)?;
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let mode = broadcast(self.value(*a), self.value(*b))?;
                if self.requires(*a) {
                    let ga = reduce_for(g, mode == Broadcast::LeftScalar, |v| v);
                    accumulate(grads, *a, ga);
                }
                if self.requires(*b) {
                    let gb = reduce_for(g, mode == Broadcast::RightScalar, |v| sign * v);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mode = broadcast(va, vb)?;
                if self.requires(*a) {
                    let local = apply_binary(g, vb, |x, y| x * y)?;
                    let ga = reduce_for(&local, mode == Broadcast::LeftScalar, |v| v);
                    accumulate(grads, *a, ga);
                }
                if self.requires(*b) {
                    let local = apply_binary(g, va, |x, y| x * y)?;
                    let gb = reduce_for(&local, mode == Broadcast::RightScalar, |v| v);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })?;
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let s = g.data()[0] / t.len() as f64;
                accumulate(grads, *a, Tensor::full(t.shape(), s));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.data()[0] / labels.len() as f64;
                let mut gl = probs.clone();
                let m = probs.cols();
                let data = gl.data_mut();
                for (i, &label) in labels.iter().enumerate() {
                    data[i * m + label] -= 1.0;
                }
                data.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, gl);
            }
            Op::Margin {
                logits,
                labels,
                rival,
            } => {
                let z = self.value(*logits);
                let m = z.cols();
                let mut gl = Tensor::zeros_like(z);
                let data = gl.data_mut();
                for (i, (&label, r)) in labels.iter().zip(rival).enumerate() {
                    if let Some(j) = r {
                        data[i * m + label] += g.data()[i];
                        data[i * m + j] -= g.data()[i];
                    }
                }
                accumulate(grads, *logits, gl);
            }
        }
        Ok(())
    }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if !logits.is_matrix() {
        return Err(Error::dim("logits must be a matrix"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::dim(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::input(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Applies `f` and, when the operand was a broadcast scalar, sums to shape `[1]`.
fn reduce_for(g: &Tensor, to_scalar: bool, f: impl Fn(f64) -> f64) -> Tensor {
    if to_scalar {
        Tensor::scalar(g.data().iter().map(|&v| f(v)).sum())
    } else {
        g.map(f)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, g: Tensor) {
    match &mut grads[node.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> Tensor {
        Tensor::matrix(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(row(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::new();
        let v = row(&[0.5, -3.0, 7.25]);
        let x = tape.constant(v.clone());
        let z = tape.constant(Tensor::zeros_like(&v));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), &v);
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let mut tape = Tape::new();
        let x = tape.constant(row(&[-5.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0]);
    }

    #[test]
    fn incompatible_broadcast_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(row(&[1.0, 2.0]));
        let b = tape.constant(row(&[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn scalar_broadcast_gradients_sum() {
        let mut tape = Tape::new();
        let s = tape.variable(Tensor::scalar(3.0));
        let x = tape.variable(row(&[1.0, 2.0, 4.0]));
        let y = tape.mul(s, x).unwrap();
        let root = tape.sum(y).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[7.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn uniform_logits_give_log_m() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 10]));
        let loss = tape.softmax_cross_entropy(z, &[0, 4, 9]).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        assert!((v - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn huge_margin_gives_near_zero_loss() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 10];
        logits[3] = 1e3;
        let z = tape.constant(row(&logits));
        let loss = tape.softmax_cross_entropy(z, &[3]).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_value() {
        // -log(e^3 / (e + e^2 + e^3)) = log(1 + e^-1 + e^-2)
        let expected = (1.0 + (-1f64).exp() + (-2f64).exp()).ln();
        assert!((expected - 0.40761).abs() < 1e-5);
        let mut tape = Tape::new();
        let z = tape.constant(row(&[1.0, 2.0, 3.0]));
        let loss = tape.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let mut tape = Tape::new();
        let z = tape.constant(row(&[1.0, 2.0, 3.0]));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(row(&[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.variable(row(&[1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_at_negative_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(-1.0));
        let y = tape.relu(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn relu_gradient_at_kink_is_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let y = tape.relu(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.variable(row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(row(&[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn margin_loss_gradient_targets_label_and_rival() {
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::matrix(2, 3, vec![3.0, 1.0, 2.0, 0.0, 5.0, 1.0]).unwrap());
        let h = tape.margin_loss(z, &[0, 0], 0.0).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 0.0]);
        let root = tape.sum(h).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(
            grads.get(z).unwrap().data(),
            &[1.0, 0.0, -1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn reused_node_accumulates() {
        // f = sum(x * x + x) => df/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.variable(row(&[0.5, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let root = tape.sum(y).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -3.0]);
    }
}
