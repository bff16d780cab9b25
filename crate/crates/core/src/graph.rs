use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Index of a value slot in the graph arena.
pub type TensorId = usize;

/// Lightweight handle to a value recorded on an [`Graph`]. The data itself
/// lives in the graph arena; handles are cheap to copy and carry the shape
/// so callers can do shape arithmetic without a graph borrow.
#[derive(Clone, Copy, Debug)]
pub struct Tensor {
    pub(crate) id: TensorId,
    pub(crate) shape: Shape,
}

impl Tensor {
    pub fn id(&self) -> TensorId {
        self.id
    }
    pub fn shape(&self) -> Shape {
        self.shape
    }
}

pub(crate) struct Slot<T> {
    pub data: Vec<T>,
    pub shape: Shape,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

/// One recorded operation: operand ids, output id and whatever the backward
/// rule needs. Replaying these in reverse order is the backward pass.
#[derive(Debug)]
pub(crate) enum Step {
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        out: TensorId,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Gap2d {
        x: TensorId,
        out: TensorId,
    },
    /// Contiguous channel slice [c0, c0+len) of `x`.
    NarrowChannels {
        x: TensorId,
        out: TensorId,
        c0: usize,
    },
    ConcatChannels {
        xs: Vec<TensorId>,
        out: TensorId,
    },
    Sigmoid {
        x: TensorId,
        out: TensorId,
    },
    Gelu {
        x: TensorId,
        out: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    /// Elementwise product; `b` may be (N,C,1,1) against (N,C,H,W) `a`.
    Mul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Div {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    /// out = scale * x + shift (scalar constants, kept in f64).
    Affine {
        x: TensorId,
        out: TensorId,
        scale: f64,
        shift: f64,
    },
    /// out = b + gate * (a - b), gate in [0,1]; fused so the convex bound
    /// holds pointwise even in f32.
    ConvexBlend {
        gate: TensorId,
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    BilinearResize {
        x: TensorId,
        out: TensorId,
    },
    /// Per-position linear map on token tensors: x (N,G,L,Ci) * w (Co,Ci).
    Linear {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        out: TensorId,
    },
    /// Batched matmul over the two leading axes: (N,G,M,K) x (N,G,K,P).
    MatmulNN {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    /// (N,G,M,K) x (N,G,P,K)^T.
    MatmulNT {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    SoftmaxLast {
        x: TensorId,
        out: TensorId,
    },
    /// LayerNorm over the last axis with per-feature gamma/beta.
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        eps: f64,
    },
    /// (N,C,H,W) -> (N,1,H*W,C)
    ToTokens {
        x: TensorId,
        out: TensorId,
    },
    /// (N,1,L,C) -> (N,C,h,w) with L == h*w
    FromTokens {
        x: TensorId,
        out: TensorId,
    },
    /// (N,1,L,C) -> (N,heads,L,C/heads)
    SplitHeads {
        x: TensorId,
        out: TensorId,
    },
    /// (N,heads,L,D) -> (N,1,L,heads*D)
    MergeHeads {
        x: TensorId,
        out: TensorId,
    },
    SumAll {
        x: TensorId,
        out: TensorId,
    },
    /// Elementwise binary cross-entropy on logits against a constant target.
    BceWithLogits {
        logits: TensorId,
        target: TensorId,
        out: TensorId,
    },
}

/// Gradient accumulation buffers for one backward pass.
pub(crate) struct GradBuf<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradBuf<T> {
    fn new(n: usize) -> Self {
        GradBuf {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    /// Take the accumulated gradient of an op output. Each slot has a single
    /// producing step, so once that step replays the grad is dead.
    pub fn take(&mut self, id: TensorId) -> Option<Vec<T>> {
        self.grads[id].take()
    }

    /// Gradient buffer for `id`, created zero-filled on first touch.
    pub fn entry(&mut self, id: TensorId, numel: usize) -> &mut [T] {
        self.grads[id]
            .get_or_insert_with(|| vec![T::ZERO; numel])
            .as_mut_slice()
    }

    fn seed(&mut self, id: TensorId, value: T) {
        self.grads[id] = Some(vec![value]);
    }
}

/// Tape-style reverse-mode autodiff graph. Operations append a value slot
/// and a [`Step`]; `backward` replays the steps in reverse, visiting each
/// recorded node exactly once, and populates `grad` on every
/// `requires_grad` leaf reachable from the loss.
pub struct Graph<T: Scalar> {
    pub(crate) slots: Vec<Slot<T>>,
    pub(crate) steps: Vec<Step>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            slots: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.slots.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn push_slot(
        &mut self,
        op: &'static str,
        data: Vec<T>,
        shape: Shape,
        requires_grad: bool,
    ) -> Result<Tensor> {
        debug_assert_eq!(data.len(), shape.numel());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let id = self.slots.len();
        self.slots.push(Slot {
            data,
            shape,
            requires_grad,
            grad: None,
        });
        Ok(Tensor { id, shape })
    }

    /// Trainable leaf: participates in gradient output.
    pub fn leaf(&mut self, data: Vec<T>, shape: Shape) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(Error::DimMismatch {
                op: "leaf",
                axis: "numel",
                expected: shape.numel(),
                got: data.len(),
            });
        }
        self.push_slot("leaf", data, shape, true)
    }

    /// Non-trainable input (images, targets, loss weight maps).
    pub fn constant(&mut self, data: Vec<T>, shape: Shape) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(Error::DimMismatch {
                op: "constant",
                axis: "numel",
                expected: shape.numel(),
                got: data.len(),
            });
        }
        self.push_slot("constant", data, shape, false)
    }

    /// Record an op output slot (never a grad leaf by itself).
    pub(crate) fn output(&mut self, op: &'static str, data: Vec<T>, shape: Shape) -> Result<Tensor> {
        self.push_slot(op, data, shape, false)
    }

    pub(crate) fn record(&mut self, step: Step) {
        self.steps.push(step);
    }

    pub fn data(&self, t: Tensor) -> &[T] {
        &self.slots[t.id].data
    }

    /// Scalar value of a 1x1x1x1 tensor.
    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert!(t.shape.is_scalar());
        self.slots[t.id].data[0].to_f64()
    }

    /// Gradient of a leaf after `backward`; `None` if nothing flowed to it.
    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.slots[t.id].grad.as_deref()
    }

    /// Reverse sweep from a scalar loss. Deterministic given identical op
    /// order: steps replay in reverse recording order, each exactly once.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if !loss.shape.is_scalar() {
            return Err(Error::NonScalarLoss { shape: loss.shape });
        }
        let mut buf = GradBuf::new(self.slots.len());
        buf.seed(loss.id, T::ONE);

        for step in self.steps.iter().rev() {
            crate::ops::step_backward(step, &self.slots, &mut buf)?;
        }

        for (id, slot) in self.slots.iter_mut().enumerate() {
            if slot.requires_grad {
                if let Some(g) = buf.grads[id].take() {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    slot.grad = Some(g);
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
    fn leaf_rejects_wrong_length() {
        let mut g: Graph<f64> = Graph::new();
        let err = g.leaf(vec![1.0; 5], Shape::new(1, 1, 2, 2)).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { axis: "numel", .. }));
    }

    #[test]
    fn nan_input_is_rejected_not_silent() {
        let mut g: Graph<f64> = Graph::new();
        let err = g
            .constant(vec![1.0, f64::NAN], Shape::new(1, 1, 1, 2))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], Shape::new(1, 1, 1, 2)).unwrap();
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }
}
