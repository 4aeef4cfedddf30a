//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so every operand of node `i` has
//! an index below `i` and a single reverse sweep visits them topologically.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::kernels::{self, BinaryOp, Conv2dSpec};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub(crate) const DETACHED: NodeId = NodeId(usize::MAX);

    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation. The forward value is computed by
/// the caller; the op only supplies the vector-Jacobian product.
pub trait CustomOp<T: Real> {
    /// One gradient buffer per input, each with that input's length.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, gy: &[T]) -> Vec<Vec<T>>;
}

/// Recorded operation together with whatever the backward pass needs.
pub enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: Conv2dSpec,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Charbonnier {
        x: NodeId,
    },
    WindowSoftmax {
        x: NodeId,
        k: usize,
    },
    AvgPool2(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u8>,
    },
    UpsampleNn2(NodeId),
    UpsampleBilinear2(NodeId),
    Binary {
        op: BinaryOp,
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Concat(Vec<NodeId>),
    PermuteChannels {
        x: NodeId,
        perm: Vec<usize>,
    },
    PixelShuffle {
        x: NodeId,
        r: usize,
    },
    PixelUnshuffle {
        x: NodeId,
        r: usize,
    },
    Pad2d(NodeId),
    Crop2d(NodeId),
    GlobalAvgPool(NodeId),
    Sum(NodeId),
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Relu(x) | Sigmoid(x) | Ln(x) | AvgPool2(x) | UpsampleNn2(x) | UpsampleBilinear2(x)
            | Pad2d(x) | Crop2d(x) | GlobalAvgPool(x) | Sum(x) => vec![*x],
            Charbonnier { x }
            | WindowSoftmax { x, .. }
            | MaxPool2 { x, .. }
            | Scale { x, .. }
            | PermuteChannels { x, .. }
            | PixelShuffle { x, .. }
            | PixelUnshuffle { x, .. } => vec![*x],
            Binary { a, b, .. } => vec![*a, *b],
            Concat(xs) => xs.clone(),
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<ParamId, NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Makes later `param(store, id)` lookups resolve to `node`.
    pub fn bind_param(&mut self, id: ParamId, node: NodeId) {
        self.params.insert(id, node);
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records a custom operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> NodeId {
        self.record(value, || Op::Custom {
            inputs: inputs.to_vec(),
            op,
        })
    }

    pub(crate) fn record(&mut self, value: Tensor<T>, op: impl FnOnce() -> Op<T>) -> NodeId {
        let op = op();
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn param_node(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let trainable = store.kind(id) == ParamKind::Trainable;
        let n = self.leaf(store.get(id).clone(), trainable);
        self.params.insert(id, n);
        n
    }

    /// Gradient of the last `backward` root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grad(id)
            .map(|g| Tensor::new(self.nodes[id.0].value.shape(), g.to_vec()).expect("grad shape"))
    }

    /// Gradients for every trainable parameter that took part in the graph.
    /// Parameters that were bound but received no gradient get zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
            .iter()
            .filter(|(_, n)| self.nodes[n.0].requires_grad)
            .map(|(&p, &n)| {
                let g = self
                    .grad_tensor(n)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[n.0].value.shape()));
                (p, g)
            })
            .collect()
    }

    /// Backpropagates from a single-element node.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.vjp(i, &g)?;
            self.grads[i] = Some(g);
            for (id, cg) in contributions {
                self.accumulate(id, cg);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn vjp(&self, i: usize, g: &[T]) -> Result<Vec<(NodeId, Vec<T>)>> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let unary = |x: NodeId, f: &dyn Fn(usize) -> T| -> Vec<(NodeId, Vec<T>)> {
            vec![(x, (0..g.len()).map(f).collect())]
        };
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, spec } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*w), *spec, g, needs(*x))?;
                let mut v = vec![(*w, gw)];
                if needs(*x) {
                    v.push((*x, gx));
                }
                if let Some(b) = b {
                    v.push((*b, gb));
                }
                v
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (gx, gg, gb) = kernels::batchnorm_backward(
                    val(*x).shape(),
                    xhat,
                    inv_std,
                    val(*gamma).data(),
                    g,
                    *train,
                );
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                unary(*x, &|j| if xd[j] > T::zero() { g[j] } else { T::zero() })
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                unary(*x, &|j| g[j] * y[j] * (T::one() - y[j]))
            }
            Op::Ln(x) => {
                let xd = val(*x).data();
                unary(*x, &|j| g[j] / xd[j])
            }
            Op::Charbonnier { x } => {
                let (xd, y) = (val(*x).data(), node.value.data());
                unary(*x, &|j| g[j] * xd[j] / y[j])
            }
            Op::WindowSoftmax { x, k } => {
                vec![(*x, kernels::window_softmax_backward(&node.value, *k, g))]
            }
            Op::AvgPool2(x) => vec![(*x, kernels::avgpool2_backward(val(*x).shape(), g))],
            Op::MaxPool2 { x, argmax } => {
                vec![(*x, kernels::maxpool2_backward(val(*x).shape(), argmax, g))]
            }
            Op::UpsampleNn2(x) => vec![(*x, kernels::upsample_nn2_backward(val(*x).shape(), g))],
            Op::UpsampleBilinear2(x) => {
                vec![(*x, kernels::upsample_bilinear2_backward(val(*x).shape(), g))]
            }
            Op::Binary { op, a, b } => {
                let (ga, gb) = kernels::binary_backward(*op, val(*a), val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { x, c } => unary(*x, &|j| g[j] * *c),
            Op::Concat(xs) => {
                let shape = node.value.shape();
                let chans: Vec<usize> = xs.iter().map(|x| val(*x).shape()[1]).collect();
                let parts = kernels::split_channels_grad(g, shape[0], shape[2] * shape[3], &chans);
                xs.iter().copied().zip(parts).collect()
            }
            Op::PermuteChannels { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                vec![(*x, kernels::permute_channels(&gt, &inv)?.into_data())]
            }
            Op::PixelShuffle { x, r } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                vec![(*x, kernels::pixel_unshuffle(&gt, *r)?.into_data())]
            }
            Op::PixelUnshuffle { x, r } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                vec![(*x, kernels::pixel_shuffle(&gt, *r)?.into_data())]
            }
            Op::Pad2d(x) => {
                let s = val(*x).shape();
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                vec![(*x, kernels::crop2d(&gt, s[2], s[3])?.into_data())]
            }
            Op::Crop2d(x) => {
                let s = val(*x).shape();
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                vec![(*x, kernels::pad2d(&gt, s[2], s[3])?.into_data())]
            }
            Op::GlobalAvgPool(x) => {
                vec![(*x, kernels::global_avg_pool_backward(val(*x).shape(), g))]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|i| val(*i)).collect();
                let gs = op.backward(&ins, &node.value, g);
                if gs.len() != inputs.len() || gs.iter().zip(&ins).any(|(a, b)| a.len() != b.len()) {
                    return Err(shape_err!("custom op returned gradients of the wrong shape"));
                }
                inputs.iter().copied().zip(gs).collect()
            }
        };
        Ok(out)
    }
}
