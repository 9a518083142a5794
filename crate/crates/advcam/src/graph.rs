//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in insertion order; one backward pass walks the
//! tape in reverse, visiting each node exactly once. Each node stores the
//! activations its backward rule needs, so nothing is recomputed.

use crate::ops;
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already consumed this graph; re-record before differentiating again")]
    BackwardConsumed,
    #[error("node id {0} out of range")]
    BadNode(NodeId),
}

enum Op {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    Relu,
    AvgPool2,
    Gap,
    Linear,
    SigmoidBce { targets: Tensor },
    Add,
    BiasAddChw,
    Scale { factor: f64 },
    AddConst,
    Abs,
    MaskedSum { weights: Tensor },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; nodes not affecting the loss get zeros.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, GraphError> {
        let value = ops::conv2d(
            &self.nodes[input].value,
            &self.nodes[kernel].value,
            stride,
            padding,
        )?;
        Ok(self.push(Op::Conv2d { stride, padding }, vec![input, kernel], value))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(&self.nodes[input].value);
        self.push(Op::Relu, vec![input], value)
    }

    pub fn bias_add_chw(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let value = ops::bias_add_chw(&self.nodes[input].value, &self.nodes[bias].value)?;
        Ok(self.push(Op::BiasAddChw, vec![input, bias], value))
    }

    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let value = ops::avg_pool2(&self.nodes[input].value)?;
        Ok(self.push(Op::AvgPool2, vec![input], value))
    }

    pub fn gap(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let value = ops::gap(&self.nodes[input].value)?;
        Ok(self.push(Op::Gap, vec![input], value))
    }

    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, GraphError> {
        let value = ops::linear(
            &self.nodes[input].value,
            &self.nodes[weight].value,
            &self.nodes[bias].value,
        )?;
        Ok(self.push(Op::Linear, vec![input, weight, bias], value))
    }

    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId, GraphError> {
        let value = ops::sigmoid_bce(&self.nodes[logits].value, &targets)?;
        Ok(self.push(
            Op::SigmoidBce { targets },
            vec![logits],
            Tensor::scalar(value),
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let value = self.nodes[a].value.axpy(1.0, &self.nodes[b].value)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[input].value.map(|v| v * factor);
        self.push(Op::Scale { factor }, vec![input], value)
    }

    /// `input + constant` (no gradient flows into the constant).
    pub fn add_const(&mut self, input: NodeId, constant: &Tensor) -> Result<NodeId, GraphError> {
        let value = self.nodes[input].value.axpy(1.0, constant)?;
        Ok(self.push(Op::AddConst, vec![input], value))
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let value = ops::abs(&self.nodes[input].value);
        self.push(Op::Abs, vec![input], value)
    }

    /// Scalar sum of `weights ⊙ input`; `weights` is a detached constant.
    pub fn masked_sum(&mut self, input: NodeId, weights: Tensor) -> Result<NodeId, GraphError> {
        let value = ops::masked_sum(&self.nodes[input].value, &weights)?;
        Ok(self.push(
            Op::MaskedSum { weights },
            vec![input],
            Tensor::scalar(value),
        ))
    }

    /// Boolean signature of every piecewise-linear branch taken during the
    /// forward pass (ReLU and Abs sign patterns). Two evaluations with equal
    /// signatures lie in the same linear region, which lets finite-difference
    /// checks exclude kink inputs exactly.
    pub fn activation_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu => {
                    let input = &self.nodes[node.inputs[0]].value;
                    sig.extend(input.data().iter().map(|&v| v > 0.0));
                }
                Op::Abs => {
                    let input = &self.nodes[node.inputs[0]].value;
                    sig.extend(input.data().iter().map(|&v| v > 0.0));
                    sig.extend(input.data().iter().map(|&v| v < 0.0));
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse-mode sweep from the scalar `loss` node. Consumes the tape:
    /// calling backward a second time without re-recording is a state error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, GraphError> {
        if self.consumed {
            return Err(GraphError::BackwardConsumed);
        }
        if loss >= self.nodes.len() {
            return Err(GraphError::BadNode(loss));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(GraphError::NonScalarLoss(
                self.nodes[loss].value.shape().to_vec(),
            ));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..n).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let keep = matches!(self.nodes[id].op, Op::Leaf) || id == loss;
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { stride, padding } => {
                    let (gin, gk) = ops::conv2d_backward(
                        &self.nodes[node.inputs[0]].value,
                        &self.nodes[node.inputs[1]].value,
                        &g,
                        *stride,
                        *padding,
                    )?;
                    accumulate(&mut grads, node.inputs[0], gin);
                    accumulate(&mut grads, node.inputs[1], gk);
                }
                Op::Relu => {
                    let gin = ops::relu_backward(&self.nodes[node.inputs[0]].value, &g);
                    accumulate(&mut grads, node.inputs[0], gin);
                }
                Op::AvgPool2 => {
                    let gin =
                        ops::avg_pool2_backward(&g, self.nodes[node.inputs[0]].value.shape());
                    accumulate(&mut grads, node.inputs[0], gin);
                }
                Op::Gap => {
                    let gin = ops::gap_backward(&g, self.nodes[node.inputs[0]].value.shape());
                    accumulate(&mut grads, node.inputs[0], gin);
                }
                Op::Linear => {
                    let (gin, gw, gb) = ops::linear_backward(
                        &self.nodes[node.inputs[0]].value,
                        &self.nodes[node.inputs[1]].value,
                        &g,
                    );
                    accumulate(&mut grads, node.inputs[0], gin);
                    accumulate(&mut grads, node.inputs[1], gw);
                    accumulate(&mut grads, node.inputs[2], gb);
                }
                Op::SigmoidBce { targets } => {
                    let gin = ops::sigmoid_bce_backward(
                        &self.nodes[node.inputs[0]].value,
                        targets,
                        g.scalar_value(),
                    );
                    accumulate(&mut grads, node.inputs[0], gin);
                }
                Op::Add => {
                    accumulate(&mut grads, node.inputs[0], g.clone());
                    accumulate(&mut grads, node.inputs[1], g.clone());
                }
                Op::BiasAddChw => {
                    let channels = self.nodes[node.inputs[1]].value.len();
                    let (gin, gb) = ops::bias_add_chw_backward(&g, channels);
                    accumulate(&mut grads, node.inputs[0], gin);
                    accumulate(&mut grads, node.inputs[1], gb);
                }
                Op::Scale { factor } => {
                    let f = *factor;
                    accumulate(&mut grads, node.inputs[0], g.map(|v| v * f));
                }
                Op::AddConst => {
                    accumulate(&mut grads, node.inputs[0], g.clone());
                }
                Op::Abs => {
                    let gin = ops::abs_backward(&self.nodes[node.inputs[0]].value, &g);
                    accumulate(&mut grads, node.inputs[0], gin);
                }
                Op::MaskedSum { weights } => {
                    let gs = g.scalar_value();
                    accumulate(&mut grads, node.inputs[0], weights.map(|w| w * gs));
                }
            }
            if keep {
                grads[id] = Some(g);
            }
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            let sum = acc.axpy(1.0, &g).expect("gradient shape match");
            *acc = sum;
        }
        slot @ None => *slot = Some(g),
    }
}
