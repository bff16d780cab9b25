use crate::error::Result;
use crate::graph::{GradBuf, Graph, Slot, Step, Tensor, TensorId};
use crate::scalar::Scalar;
use crate::shape::Shape;

impl<T: Scalar> Graph<T> {
    /// Sum of all elements, as a (1,1,1,1) scalar tensor.
    pub fn sum_all(&mut self, x: Tensor) -> Result<Tensor> {
        let mut acc = T::ZERO;
        for v in self.data(x) {
            acc += *v;
        }
        let t = self.output("sum_all", vec![acc], Shape::scalar())?;
        self.record(Step::SumAll { x: x.id(), out: t.id() });
        Ok(t)
    }

    /// Mean of all elements.
    pub fn mean_all(&mut self, x: Tensor) -> Result<Tensor> {
        let n = x.shape().numel();
        let s = self.sum_all(x)?;
        self.affine(s, 1.0 / n as f64, 0.0)
    }
}

pub(super) fn backward_sum_all<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let g = dy[0];
    let numel = slots[x].shape.numel();
    let dx = buf.entry(x, numel);
    for v in dx.iter_mut() {
        *v += g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 3.0, 0.5], Shape::new(1, 1, 2, 2)).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_x() {
        let mut g: Graph<f64> = Graph::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = g.leaf(data.clone(), Shape::new(1, 1, 2, 2)).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        for (gv, xv) in grad.iter().zip(&data) {
            assert!((gv - 2.0 * xv).abs() < 1e-15);
        }
    }
}
