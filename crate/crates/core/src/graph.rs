//! Operation tape and reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a [`Node`] in topological
//! order; [`Graph::backward`] replays the tape in reverse, accumulating
//! vector-Jacobian products into per-node gradients. Gradients are
//! accumulated in `f64` and quantized to the graph precision at the end.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, Aux};
use crate::tensor::{Precision, Tensor};

pub type NodeId = usize;

/// Operation kinds recorded on the tape. Attributes ride along with the kind.
#[derive(Clone, Debug)]
pub enum OpKind {
    /// Leaf holding an externally supplied tensor (input, parameter, constant).
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Log,
    Relu,
    ClampMin(f64),
    Clamp(f64, f64),
    /// Softmax over the channel axis of an NCHW tensor.
    Softmax,
    MatMul,
    Conv2d {
        stride: (usize, usize),
        padding: (usize, usize),
    },
    MaxPool2x2,
    UpsampleNearest(usize),
    UpsampleBilinear(usize),
    /// Average pooling with square window and stride equal to the factor.
    AvgPool(usize),
    ConcatChannels,
    /// One of the four Haar subbands: 0=LL, 1=LH, 2=HL, 3=HH.
    HaarBand(usize),
    /// Inverse Haar transform from (LL, LH, HL, HH) inputs.
    HaarUnpool,
    /// Batch normalization using batch statistics over (N, H, W).
    BatchNormTrain { eps: f64 },
    /// Batch normalization using frozen running statistics.
    BatchNormEval {
        eps: f64,
        mean: Arc<Vec<f64>>,
        var: Arc<Vec<f64>>,
    },
    InstanceNorm { eps: f64 },
    /// Adaptive instance normalization: content restyled by style statistics.
    AdaIn { eps: f64 },
    Sum,
    Mean,
    /// Per-channel sum over (N, H, W) of an NCHW tensor, yielding shape (C).
    ChannelSum,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::ClampMin(_) => "clamp_min",
            OpKind::Clamp(_, _) => "clamp",
            OpKind::Softmax => "softmax",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool2x2 => "max_pool2x2",
            OpKind::UpsampleNearest(_) => "upsample_nearest",
            OpKind::UpsampleBilinear(_) => "upsample_bilinear",
            OpKind::AvgPool(_) => "avg_pool",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::HaarBand(_) => "haar_band",
            OpKind::HaarUnpool => "haar_unpool",
            OpKind::BatchNormTrain { .. } => "batch_norm_train",
            OpKind::BatchNormEval { .. } => "batch_norm_eval",
            OpKind::InstanceNorm { .. } => "instance_norm",
            OpKind::AdaIn { .. } => "adain",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ChannelSum => "channel_sum",
        }
    }
}

/// One recorded operation: kind, input node ids and the output value.
pub struct Node {
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub(crate) aux: Aux,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or an all-zero tensor of the given shape when the
    /// node did not influence the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize], precision: Precision) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape, precision),
        }
    }
}

/// Tape of operations, topologically ordered by construction.
pub struct Graph {
    precision: Precision,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            precision,
            nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf node holding `t` (converted to the graph precision).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let t = t.to_precision(self.precision);
        self.nodes.push(Node {
            kind: OpKind::Input,
            inputs: Vec::new(),
            value: t,
            aux: Aux::None,
        });
        self.nodes.len() - 1
    }

    /// Execute an operation on existing nodes and record the result.
    ///
    /// Every kind documents its own shape rule; violations produce a
    /// shape-mismatch error naming the kind and the offending extents.
    pub fn op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let mut vals = Vec::with_capacity(inputs.len());
        for &id in inputs {
            vals.push(&self.node_checked(id)?.value);
        }
        let (value, aux) = ops::forward(&kind, &vals, self.precision)?;
        self.nodes.push(Node {
            kind,
            inputs: inputs.to_vec(),
            value,
            aux,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    fn node_checked(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("detached node {} referenced", id)))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Batch statistics recorded by a `BatchNormTrain` node, used by layers
    /// to update running statistics.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id].aux {
            Aux::Stats { mean, var } => Some((mean, var)),
            _ => None,
        }
    }

    /// Reverse-mode differentiation from a scalar loss node.
    ///
    /// Returns the gradient of the loss with respect to every node that
    /// influences it; gradient shapes equal the node value shapes.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let loss_node = self.node_checked(loss)?;
        if loss_node.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got {} elements",
                loss_node.value.numel()
            )));
        }

        // f64 accumulation buffers, quantized only at the end.
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        acc[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let grad_out = match acc[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if matches!(node.kind, OpKind::Input) {
                acc[id] = Some(grad_out);
                continue;
            }
            let input_vals: Vec<&Tensor> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads =
                ops::backward(&node.kind, &input_vals, &node.value, &node.aux, &grad_out)?;
            // Keep the non-leaf node's own gradient for callers that ask for it.
            acc[id] = Some(grad_out);
            for (&inp, g) in node.inputs.iter().zip(input_grads) {
                match &mut acc[inp] {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(g.iter()) {
                            *e += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let grads = acc
            .into_iter()
            .enumerate()
            .map(|(id, buf)| {
                buf.map(|b| Tensor::from_parts(self.nodes[id].value.shape().to_vec(), b, self.precision))
            })
            .collect();
        Ok(GradientMap { grads })
    }
}
