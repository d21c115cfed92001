//! Reverse-mode differentiation over a tape of the layer ops.
//!
//! Nodes are appended in evaluation order and may only reference nodes that
//! already exist, so the tape is acyclic by construction; a reference to a
//! node that is not on the tape is rejected as a construction error.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalization evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize by the batch second moment.
    Train,
    /// Normalize by stored running statistics.
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
    },
    Relu {
        input: NodeId,
    },
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        inv_rms: Vec<T>,
        batch_mean_square: Option<Vec<T>>,
        mode: NormMode,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// First `channels` channels of a `B×C×H×W` node.
    SliceChannels {
        input: NodeId,
        channels: usize,
    },
    SumSquares(NodeId),
    MeanSquaredError(NodeId, NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of evaluated nodes.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} referenced before it exists on a tape of {} nodes",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        value.check_finite("graph node")?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Adds an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        let v = ops::conv2d_forward(self.value(input), self.value(kernel))?;
        self.push(v, Op::Conv2d { input, kernel }, &[input, kernel])
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let v = ops::relu_forward(self.value(input));
        self.push(v, Op::Relu { input }, &[input])
    }

    /// Bias-free batch normalization. `running` supplies the statistics in
    /// eval mode and is ignored in train mode.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        scale: NodeId,
        running: &[T],
        epsilon: f64,
        mode: NormMode,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(scale)?;
        let x = self.value(input);
        let (stats, batch) = match mode {
            NormMode::Train => {
                let ms = ops::channel_mean_square(x)?;
                (ms.clone(), Some(ms))
            }
            NormMode::Eval => (running.to_vec(), None),
        };
        let (v, inv_rms) = ops::batchnorm_forward(x, self.value(scale), &stats, epsilon)?;
        self.push(
            v,
            Op::BatchNorm {
                input,
                scale,
                inv_rms,
                batch_mean_square: batch,
                mode,
            },
            &[input, scale],
        )
    }

    /// Per-channel second moments measured by a train-mode batch-norm node.
    pub fn batch_mean_square(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes.get(id.0)?.op {
            Op::BatchNorm {
                batch_mean_square, ..
            } => batch_mean_square.as_deref(),
            _ => None,
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn slice_channels(&mut self, input: NodeId, channels: usize) -> Result<NodeId> {
        self.check(input)?;
        let (b, c, h, w) = self.value(input).dims4()?;
        if channels > c {
            return Err(Error::dim(format!("cannot take {channels} of {c} channels")));
        }
        let hw = h * w;
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(b * channels * hw);
        for item in 0..b {
            data.extend_from_slice(&src[item * c * hw..][..channels * hw]);
        }
        let v = Tensor::from_vec(&[b, channels, h, w], data)?;
        self.push(v, Op::SliceChannels { input, channels }, &[input])
    }

    /// Scalar `Σ x²`.
    pub fn sum_squares(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let v = Tensor::from_vec(&[1], vec![self.value(input).sum_sq()])?;
        self.push(v, Op::SumSquares(input), &[input])
    }

    /// Scalar `mean((a - b)²)`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let d = self.value(a).sub(self.value(b))?;
        let n = T::lit(d.len().max(1) as f64);
        let v = Tensor::from_vec(&[1], vec![d.sum_sq() / n])?;
        self.push(v, Op::MeanSquaredError(a, b), &[a, b])
    }

    /// Gradients of a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let seed = Tensor::full(self.value(loss).shape(), T::one());
        self.backward_seeded(loss, seed)
    }

    /// Vector-Jacobian product: gradients of `<seed, value(output)>`.
    pub fn backward_seeded(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.check(output)?;
        self.value(output).same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
            match slot {
                Some(acc) => acc.axpy(T::one(), &g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let wants = |id: NodeId| self.nodes[id.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel } => {
                    let (gi, gk) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        wants(*input),
                        wants(*kernel),
                    )?;
                    if let Some(gi) = gi {
                        accumulate(&mut grads[input.0], gi)?;
                    }
                    if let Some(gk) = gk {
                        accumulate(&mut grads[kernel.0], gk)?;
                    }
                }
                Op::Relu { input } => {
                    let gi = ops::relu_backward(self.value(*input), &g)?;
                    accumulate(&mut grads[input.0], gi)?;
                }
                Op::BatchNorm {
                    input,
                    scale,
                    inv_rms,
                    mode,
                    ..
                } => {
                    let (gi, gs) = ops::batchnorm_backward(
                        self.value(*input),
                        self.value(*scale),
                        inv_rms,
                        &g,
                        *mode == NormMode::Train,
                    )?;
                    if wants(*input) {
                        accumulate(&mut grads[input.0], gi)?;
                    }
                    if wants(*scale) {
                        accumulate(&mut grads[scale.0], gs)?;
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.clone())?;
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.clone())?;
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.scale(-T::one()))?;
                    }
                }
                Op::SliceChannels { input, channels } => {
                    let (b, c, h, w) = self.value(*input).dims4()?;
                    let hw = h * w;
                    let mut full = Tensor::zeros(&[b, c, h, w]);
                    for item in 0..b {
                        full.data_mut()[item * c * hw..][..channels * hw]
                            .copy_from_slice(&g.data()[item * channels * hw..][..channels * hw]);
                    }
                    accumulate(&mut grads[input.0], full)?;
                }
                Op::SumSquares(a) => {
                    let s = g.data()[0] * T::lit(2.0);
                    accumulate(&mut grads[a.0], self.value(*a).scale(s))?;
                }
                Op::MeanSquaredError(a, b) => {
                    let d = self.value(*a).sub(self.value(*b))?;
                    let s = g.data()[0] * T::lit(2.0) / T::lit(d.len().max(1) as f64);
                    let ga = d.scale(s);
                    if wants(*b) {
                        accumulate(&mut grads[b.0], ga.scale(-T::one()))?;
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], ga)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_product_gradient() {
        // loss = (w·x − t)², w=1, x=2, t=0 → d/dw = 2(wx−t)x = 8
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 1, 1], 2.0), false).unwrap();
        let w = g.leaf(Tensor::full(&[1, 1, 1, 1], 1.0), true).unwrap();
        let t = g.leaf(Tensor::zeros(&[1, 1, 1, 1]), false).unwrap();
        let y = g.conv2d(x, w).unwrap();
        let r = g.sub(y, t).unwrap();
        let loss = g.sum_squares(r).unwrap();
        assert_eq!(g.value(loss).data(), &[4.0]);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[8.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn relu_square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap(), true)
            .unwrap();
        let r = g.relu(x).unwrap();
        let loss = g.sum_squares(r).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 4.0]);
    }

    #[test]
    fn foreign_node_is_rejected() {
        let mut a = Graph::<f64>::new();
        let mut b = Graph::<f64>::new();
        let x = a.leaf(Tensor::zeros(&[1]), true).unwrap();
        let y = a.relu(x).unwrap();
        b.leaf(Tensor::zeros(&[1]), true).unwrap();
        assert!(matches!(b.relu(y), Err(Error::Graph(_))));
        assert!(matches!(b.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn nan_is_trapped() {
        let mut g = Graph::<f64>::new();
        let v = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        assert!(matches!(g.leaf(v, false), Err(Error::Numeric(_))));
    }
}
