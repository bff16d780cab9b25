use crate::error::Result;
use crate::graph::{GradBuf, Graph, Slot, Step, Tensor, TensorId};
use crate::scalar::Scalar;
use crate::shape::Shape;

impl<T: Scalar> Graph<T> {
    /// Global average pooling: per-channel spatial mean, (N,C,H,W) -> (N,C,1,1).
    pub fn gap2d(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let hw = xs.h * xs.w;
        let inv = T::from_f64(1.0 / hw as f64);
        let data = self.data(x);
        let mut out = vec![T::ZERO; xs.n * xs.c];
        for nc in 0..xs.n * xs.c {
            let mut acc = T::ZERO;
            for v in &data[nc * hw..(nc + 1) * hw] {
                acc += *v;
            }
            out[nc] = acc * inv;
        }
        let t = self.output("gap2d", out, Shape::new(xs.n, xs.c, 1, 1))?;
        self.record(Step::Gap2d { x: x.id(), out: t.id() });
        Ok(t)
    }
}

pub(super) fn backward_gap<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let hw = xs.h * xs.w;
    let inv = T::from_f64(1.0 / hw as f64);
    let dx = buf.entry(x, xs.numel());
    for nc in 0..xs.n * xs.c {
        let g = dy[nc] * inv;
        for v in &mut dx[nc * hw..(nc + 1) * hw] {
            *v += g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_constant() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![3.25; 2 * 3 * 4 * 4], Shape::new(2, 3, 4, 4)).unwrap();
        let y = g.gap2d(x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 1, 1));
        assert!(g.data(y).iter().all(|&v| (v - 3.25).abs() < 1e-15));
    }

    #[test]
    fn pools_to_arithmetic_mean() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], Shape::new(1, 1, 2, 2)).unwrap();
        let y = g.gap2d(x).unwrap();
        assert_eq!(g.data(y)[0], 2.5);
    }

    #[test]
    fn backward_distributes_uniformly() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.7; 12], Shape::new(1, 3, 2, 2)).unwrap();
        let y = g.gap2d(x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert!(grad.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
