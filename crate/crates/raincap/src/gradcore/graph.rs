//! Graph storage, leaf creation, and the backward driver.

use super::shape::Shape;
use super::{elem, ops, Element, GradError, Result};

/// Handle to a node in a [`Graph`]; cheap to copy.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// How a node was produced, with parent ids and values saved for backward.
#[derive(Debug)]
pub enum Op<T> {
    Leaf,
    /// Elementwise binary op; `b` broadcasts into `a`'s shape.
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Div {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        c: T,
    },
    AddScalar {
        a: TensorId,
    },
    ClampMin {
        a: TensorId,
        threshold: T,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        a: TensorId,
    },
    Reshape {
        a: TensorId,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Relu {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    Tanh {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
        axis: usize,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
    },
    AdaptiveAvgPool {
        a: TensorId,
    },
    NearestUpsample {
        a: TensorId,
        factor: usize,
    },
    /// Saved `xhat` is the normalized input; `inv_std` is per channel.
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    Sum {
        a: TensorId,
    },
    Mean {
        a: TensorId,
    },
    MseLoss {
        pred: TensorId,
        target: TensorId,
    },
    L1Loss {
        pred: TensorId,
        target: TensorId,
    },
    /// Saved `probs` is the row-wise softmax of the logits.
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        probs: Vec<T>,
        mean: bool,
    },
}

/// One recorded tensor: extents, forward value, and provenance.
#[derive(Debug)]
pub struct Node<T> {
    pub(crate) shape: Shape,
    pub(crate) data: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// A tape of op records. Construction order is a topological order, so the
/// backward pass is a single reverse sweep. Gradients accumulate across
/// repeated [`Graph::backward`] calls until [`Graph::zero_grads`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        shape: Shape,
        data: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> TensorId {
        debug_assert_eq!(shape.numel(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Inserts an input tensor. `requires_grad` marks it as a differentiation
    /// target; everything derived from it will record gradients.
    pub fn leaf(&mut self, shape: Shape, data: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        if shape.numel() != data.len() {
            return Err(GradError::ShapeMismatch {
                op: "leaf",
                detail: format!("{} elements for shape {}", data.len(), shape),
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: Shape, data: Vec<T>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(Shape::scalar(), vec![elem(v)], false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    /// Scalar convenience accessor: the first element of a node's value.
    pub fn value(&self, id: TensorId) -> T {
        self.nodes[id.0].data[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of the last backward target w.r.t. this node, if
    /// the node participates in differentiation and backward has run.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub(crate) fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    /// Accumulates `d(loss)/d(node)` into every gradient-requiring node that
    /// `loss` depends on. `loss` must be scalar. Unvisited parameters that
    /// were marked `requires_grad` keep a zero gradient only if they already
    /// have one; fresh allocation happens lazily on first contribution.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let numel = self.nodes[loss.0].shape.numel();
        if numel != 1 {
            return Err(GradError::NotScalar { numel });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing on the tape depends on a parameter
        }
        {
            let slot = &mut self.grads[loss.0];
            let g = slot.get_or_insert_with(|| vec![T::zero(); 1]);
            g[0] = g[0] + T::one();
        }
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaves keep their accumulated gradient
            }
            // Interior gradients are consumed as they are propagated, so a
            // later `backward` call re-derives them from a fresh seed instead
            // of double-counting what the previous sweep left behind.
            let (before, at) = self.grads.split_at_mut(i);
            let gout = at[0].take().expect("checked above");
            ops::backward_node(&self.nodes, i, &gout, before);
        }
        Ok(())
    }

    /// Ensures a gradient buffer exists for `id`, returning it zero-filled on
    /// first use. Intended for reading gradients of untouched parameters.
    pub fn grad_or_zeros(&mut self, id: TensorId) -> &[T] {
        let numel = self.nodes[id.0].shape.numel();
        self.grads[id.0].get_or_insert_with(|| vec![T::zero(); numel])
    }
}
