//! Reverse-mode tape over the kernels in [`ops`](super::ops).
//!
//! Nodes are appended in forward order, so a single reverse sweep over the
//! arena is a valid topological backward pass. Gradients may be seeded at any
//! set of nodes at once; leaves keep their accumulated gradient after
//! [`Graph::backward`] for retrieval.

use super::ops::{self, BnCache, BnMode, BnRunning};
use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

enum OpRecord {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Softplus {
        input: NodeId,
    },
    ResizeBilinear {
        input: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    WeightedMerge {
        features: [NodeId; 3],
        weights: [NodeId; 3],
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: OpRecord,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: OpRecord) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, OpRecord::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient accumulated at `id`, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].value.grad()
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = ops::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            OpRecord::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut BnRunning,
        mode: BnMode,
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        let (out, cache) = ops::batch_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running,
            mode,
            eps,
            momentum,
        )?;
        Ok(self.push(
            out,
            OpRecord::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu_forward(self.value(input));
        self.push(out, OpRecord::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = ops::sigmoid_forward(self.value(input));
        self.push(out, OpRecord::Sigmoid { input })
    }

    pub fn softplus(&mut self, input: NodeId) -> NodeId {
        let out = ops::softplus_forward(self.value(input));
        self.push(out, OpRecord::Softplus { input })
    }

    pub fn resize_bilinear(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let out = ops::resize_bilinear_forward(self.value(input), out_h, out_w)?;
        Ok(self.push(out, OpRecord::ResizeBilinear { input }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool_forward(self.value(input))?;
        Ok(self.push(out, OpRecord::GlobalAvgPool { input }))
    }

    pub fn weighted_merge(
        &mut self,
        features: [NodeId; 3],
        weights: [NodeId; 3],
        eps: f64,
    ) -> Result<NodeId> {
        let out = ops::weighted_merge_forward(
            [
                self.value(features[0]),
                self.value(features[1]),
                self.value(features[2]),
            ],
            [
                self.value(weights[0]),
                self.value(weights[1]),
                self.value(weights[2]),
            ],
            eps,
        )?;
        Ok(self.push(out, OpRecord::WeightedMerge { features, weights, eps }))
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: &[f64]) {
        match &mut grads[id] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => grads[id] = Some(contribution.to_vec()),
        }
    }

    /// Reverse sweep from the given seed gradients.
    ///
    /// Each seed must match its node's shape. After the sweep, every node the
    /// sweep reached (including all leaves on a path to a seed) holds its
    /// gradient, retrievable via [`Graph::grad`].
    pub fn backward(&mut self, seeds: Vec<(NodeId, Vec<f64>)>) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        for (id, seed) in seeds {
            if seed.len() != self.nodes[id].value.numel() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed for node {id} has {} elements, node has {}",
                        seed.len(),
                        self.nodes[id].value.numel()
                    ),
                ));
            }
            Self::accumulate(&mut grads, id, &seed);
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let g_tensor = {
                let mut t = Tensor::zeros(self.nodes[i].value.shape());
                t.data_mut().copy_from_slice(&g);
                t
            };
            match &self.nodes[i].op {
                OpRecord::Leaf => {
                    // keep for retrieval
                    self.nodes[i].value.set_grad(g);
                }
                OpRecord::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gi, gw, gb) = ops::conv2d_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*weight].value,
                        *stride,
                        *padding,
                        &g_tensor,
                    )?;
                    let (input, weight, bias) = (*input, *weight, *bias);
                    Self::accumulate(&mut grads, input, gi.data());
                    Self::accumulate(&mut grads, weight, gw.data());
                    Self::accumulate(&mut grads, bias, gb.data());
                }
                OpRecord::BatchNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (gi, gg, gb) = ops::batch_norm_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*gamma].value,
                        cache,
                        &g_tensor,
                    )?;
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    Self::accumulate(&mut grads, input, gi.data());
                    Self::accumulate(&mut grads, gamma, gg.data());
                    Self::accumulate(&mut grads, beta, gb.data());
                }
                OpRecord::Relu { input } => {
                    let gi = ops::relu_backward(&self.nodes[*input].value, &g);
                    let input = *input;
                    Self::accumulate(&mut grads, input, &gi);
                }
                OpRecord::Sigmoid { input } => {
                    let gi = ops::sigmoid_backward(&self.nodes[i].value, &g);
                    let input = *input;
                    Self::accumulate(&mut grads, input, &gi);
                }
                OpRecord::Softplus { input } => {
                    let gi = ops::softplus_backward(&self.nodes[*input].value, &g);
                    let input = *input;
                    Self::accumulate(&mut grads, input, &gi);
                }
                OpRecord::ResizeBilinear { input } => {
                    let shape = self.nodes[*input].value.shape().to_vec();
                    let gi = ops::resize_bilinear_backward(&shape, &g_tensor)?;
                    let input = *input;
                    Self::accumulate(&mut grads, input, gi.data());
                }
                OpRecord::GlobalAvgPool { input } => {
                    let shape = self.nodes[*input].value.shape().to_vec();
                    let gi = ops::global_avg_pool_backward(&shape, &g_tensor)?;
                    let input = *input;
                    Self::accumulate(&mut grads, input, gi.data());
                }
                OpRecord::WeightedMerge {
                    features,
                    weights,
                    eps,
                } => {
                    let (gf, gw) = ops::weighted_merge_backward(
                        [
                            &self.nodes[features[0]].value,
                            &self.nodes[features[1]].value,
                            &self.nodes[features[2]].value,
                        ],
                        [
                            &self.nodes[weights[0]].value,
                            &self.nodes[weights[1]].value,
                            &self.nodes[weights[2]].value,
                        ],
                        *eps,
                        &self.nodes[i].value,
                        &g_tensor,
                    )?;
                    let (features, weights) = (*features, *weights);
                    for b in 0..3 {
                        Self::accumulate(&mut grads, features[b], gf[b].data());
                        Self::accumulate(&mut grads, weights[b], gw[b].data());
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_chain_accumulates_at_leaf() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![0.1, -0.4, 0.7, 0.2]).unwrap());
        let s = g.sigmoid(x);
        let p = g.global_avg_pool(s).unwrap();
        g.backward(vec![(p, vec![1.0])]).unwrap();
        let grad = g.grad(x).expect("leaf gradient");
        for (i, v) in g.value(x).data().iter().enumerate() {
            let y = ops::sigmoid(*v);
            let expect = y * (1.0 - y) / 4.0;
            assert!((grad[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_leaf_gets_summed_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![0.3]).unwrap());
        let a = g.relu(x);
        let b = g.relu(x);
        g.backward(vec![(a, vec![1.0]), (b, vec![2.0])]).unwrap();
        assert!((g.grad(x).unwrap()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn seed_shape_is_validated() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let err = g.backward(vec![(x, vec![1.0])]).unwrap_err();
        assert!(err.to_string().contains("seed for node"));
    }
}
