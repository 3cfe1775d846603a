//! The recording graph: forward values plus enough structure to replay the
//! forward pass and run reverse-mode backward once.

use std::sync::Arc;

use crate::diffcore::ops::{eval, vjp, Op};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Append-only during the forward pass; `backward` runs exactly once per
/// recorded forward. Graphs are single-threaded by contract — concurrency
/// happens across independent graphs, never within one.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are collected for it iff
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = eval(&op, &tensors)?;
        value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── Builder methods, one per primitive ──────────────────────────────

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, padding }, &[x, kernel, bias])
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.apply(Op::Linear, &[x, weight, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddConst(c), &[x])
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(Op::DivScalar, &[x, s])
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(Op::MulScalar, &[x, s])
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SoftmaxChannels, &[x])
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.apply(Op::AdaptiveAvgPool { out_h, out_w }, &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Upsample2x, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.apply(Op::CrossEntropy { target }, &[logits])
    }

    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        self.apply(Op::KlDivergence, &[p_logits, q_logits])
    }

    pub fn pixelwise_cross_entropy(&mut self, logits: Var, targets: Arc<Vec<u8>>) -> Result<Var> {
        self.apply(Op::PixelwiseCrossEntropy { targets }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sum_channel_axis(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumChannelAxis, &[x])
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumRows, &[x])
    }

    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumCols, &[x])
    }

    pub fn dot_const(&mut self, x: Var, weights: Arc<Tensor>) -> Result<Var> {
        self.apply(Op::DotConst { weights }, &[x])
    }

    pub fn slice_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        self.apply(Op::SliceChannel { channel }, &[x])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::SliceChannels { start, end }, &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::ConcatChannels, &[a, b])
    }

    pub fn stack_scalars(&mut self, scalars: &[Var]) -> Result<Var> {
        self.apply(Op::StackScalars, scalars)
    }

    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MeanChannels, &[x])
    }

    pub fn index_element(&mut self, x: Var, index: usize) -> Result<Var> {
        self.apply(Op::IndexElement { index }, &[x])
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `root`, populating gradients for
    /// every `requires_grad` node reachable from it. Calling this a second
    /// time without re-running the forward pass is an error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::usage(
                "backward already ran on this graph; re-run the forward pass first",
            ));
        }
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::usage(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let g = grads[id].take().expect("grad present");
            let input_grads = vjp(&node.op, &inputs, &node.value, &g, &needs)?;
            // Interior gradients are dropped once consumed; leaves keep theirs.
            for (&slot, maybe_g) in node.inputs.iter().zip(input_grads) {
                if let Some(gt) = maybe_g {
                    match &mut grads[slot] {
                        Some(acc) => acc.add_assign(&gt),
                        empty => *empty = Some(gt),
                    }
                }
            }
        }
        // Retain gradients only for leaves (the trainable inputs).
        for (id, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[id] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Recomputes every non-leaf value from the recorded ops in topological
    /// order. Used to assert the replay-bit-exactness contract.
    pub fn replay_values(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = if matches!(node.op, Op::Leaf) {
                node.value.clone()
            } else {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                eval(&node.op, &inputs)?
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Stored forward values, in recording order.
    pub fn recorded_values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.5]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn second_backward_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.3, -1.7, 2.9, 0.01]), true);
        let a = g.sigmoid(x).unwrap();
        let b = g.scale(a, 3.7).unwrap();
        let c = g.mul(a, b).unwrap();
        let _ = g.sum(c).unwrap();
        let replayed = g.replay_values().unwrap();
        for (orig, rep) in g.recorded_values().zip(&replayed) {
            assert_eq!(orig.data(), rep.data());
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.2, -0.4, 1.3];
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(logits.clone()), true);
        let loss = g.cross_entropy(z, 1).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(z).unwrap();

        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (i, &gv) in grad.data().iter().enumerate() {
            let p = exps[i] / denom;
            let expected = if i == 1 { p - 1.0 } else { p };
            assert!((gv - expected).abs() < 1e-12, "channel {i}: {gv} vs {expected}");
        }
    }
}
