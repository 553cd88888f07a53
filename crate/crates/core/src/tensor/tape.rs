//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so every operation's inputs
//! precede it and a single reverse sweep visits each node after all of its
//! consumers have contributed their gradient.

use super::ops::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        cols: Vec<f32>,
        geom: ConvGeometry,
    },
    AddChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    CrossEntropy {
        probs: NodeId,
        label: usize,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    Sum {
        input: NodeId,
    },
    Mean {
        inputs: Vec<NodeId>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; `None` for nodes the loss does not depend on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[id.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient for `id`, or zeros of the node's shape when unreachable.
    pub fn get_or_zeros(&self, id: NodeId) -> Tensor {
        self.get(id)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match self.grads[id.0].take() {
            Some(data) => Tensor { shape, data },
            None => Tensor::zeros(&shape),
        }
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (out, cols, geom) =
            ops::conv2d_cols(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                cols,
                geom,
            },
        ))
    }

    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::add_channel_bias(self.value(input), self.value(bias))?;
        Ok(self.push(out, Op::AddChannelBias { input, bias }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool_indices(self.value(input), window, stride)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool { input }))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let out = ops::softmax(self.value(input));
        self.push(out, Op::Softmax { input })
    }

    pub fn cross_entropy(&mut self, probs: NodeId, label: usize) -> Result<NodeId> {
        let loss = ops::cross_entropy(self.value(probs), label)?;
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy { probs, label },
        ))
    }

    /// Fused `-log softmax(logits)[label]`, stable for any finite logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: z.len(),
            });
        }
        let logp = ops::log_softmax(z);
        let probs = logp.iter().map(|v| v.exp()).collect();
        let loss = Tensor::scalar(-logp[label] as f32);
        Ok(self.push(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum { input })
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidGeometry {
                op: "mean",
                detail: "no inputs".into(),
            });
        }
        let mut s = 0.0f64;
        for &i in inputs {
            let v = self.value(i);
            if !v.is_scalar() {
                return Err(Error::NonScalarLoss(v.shape().to_vec()));
            }
            s += v.data()[0] as f64;
        }
        let m = s / inputs.len() as f64;
        Ok(self.push(
            Tensor::scalar(m as f32),
            Op::Mean {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Gradients of a scalar loss with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let v = self.value(loss);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(self.backward_from(loss, &[1.0]))
    }

    /// Vector-Jacobian product seeded with `upstream` at `node`.
    pub fn backward_from(&self, node: NodeId, upstream: &[f32]) -> Gradients {
        assert_eq!(
            upstream.len(),
            self.value(node).len(),
            "upstream gradient length"
        );
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[node.0] = Some(upstream.to_vec());

        for idx in (0..=node.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        }
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                cols,
                geom,
            } => {
                let (gi, gk) = ops::conv2d_backward(self.value(*kernel), cols, geom, g);
                accumulate(grads, *input, gi.data());
                accumulate(grads, *kernel, gk.data());
            }
            Op::AddChannelBias { input, bias } => {
                accumulate(grads, *input, g);
                let c = self.value(*bias).len();
                let plane = g.len() / c;
                let gb: Vec<f32> = g
                    .chunks(plane)
                    .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                accumulate(grads, *bias, &gb);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gi: Vec<f32> = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *input, &gi);
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![0.0f32; self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                accumulate(grads, *input, &gi);
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let plane = x.len() / g.len();
                let gi: Vec<f32> = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n((gv as f64 / plane as f64) as f32, plane))
                    .collect();
                accumulate(grads, *input, &gi);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let d = x.len();
                let gx: Vec<f32> = (0..d)
                    .map(|j| {
                        g.iter()
                            .enumerate()
                            .map(|(k, &gv)| gv as f64 * w[k * d + j] as f64)
                            .sum::<f64>() as f32
                    })
                    .collect();
                let gw: Vec<f32> = g
                    .iter()
                    .flat_map(|&gv| x.iter().map(move |&xv| (gv as f64 * xv as f64) as f32))
                    .collect();
                accumulate(grads, *input, &gx);
                accumulate(grads, *weight, &gw);
                accumulate(grads, *bias, g);
            }
            Op::Softmax { input } => {
                let p = node.value.data();
                let dot: f64 = g.iter().zip(p).map(|(&a, &b)| a as f64 * b as f64).sum();
                let gi: Vec<f32> = g
                    .iter()
                    .zip(p)
                    .map(|(&gv, &pv)| (pv as f64 * (gv as f64 - dot)) as f32)
                    .collect();
                accumulate(grads, *input, &gi);
            }
            Op::CrossEntropy { probs, label } => {
                let p = self.value(*probs).data()[*label] as f64;
                let mut gi = vec![0.0f32; self.value(*probs).len()];
                if p > ops::PROB_FLOOR {
                    gi[*label] = (-(g[0] as f64) / p) as f32;
                }
                accumulate(grads, *probs, &gi);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                let gi: Vec<f32> = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let onehot = if k == *label { 1.0 } else { 0.0 };
                        (g[0] as f64 * (p - onehot)) as f32
                    })
                    .collect();
                accumulate(grads, *logits, &gi);
            }
            Op::Sum { input } => {
                let n = self.value(*input).len();
                accumulate(grads, *input, &vec![g[0]; n]);
            }
            Op::Mean { inputs } => {
                let share = (g[0] as f64 / inputs.len() as f64) as f32;
                for &i in inputs {
                    accumulate(grads, i, &[share]);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: NodeId, g: &[f32]) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
