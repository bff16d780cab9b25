use crate::error::{Error, Result};
use crate::graph::{GradBuf, Graph, Slot, Step, Tensor, TensorId};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Source taps for one output coordinate under the align-corners=false
/// convention: src = (dst + 0.5) * in/out - 0.5, clamped at the low edge,
/// with the high tap clamped to the last row/column.
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Bilinear resample to (out_h, out_w), align-corners=false.
    pub fn bilinear_resize(&mut self, x: Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("bilinear_resize: output dims must be >= 1"));
        }
        let xs = x.shape();
        let os = Shape::new(xs.n, xs.c, out_h, out_w);
        let ty = taps(out_h, xs.h);
        let tx = taps(out_w, xs.w);
        let data = self.data(x);
        let mut out = vec![T::ZERO; os.numel()];
        for nc in 0..xs.n * xs.c {
            let plane = &data[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
            let out_plane = &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let v00 = plane[y0 * xs.w + x0].to_f64();
                    let v01 = plane[y0 * xs.w + x1].to_f64();
                    let v10 = plane[y1 * xs.w + x0].to_f64();
                    let v11 = plane[y1 * xs.w + x1].to_f64();
                    let top = v00 + wx * (v01 - v00);
                    let bot = v10 + wx * (v11 - v10);
                    out_plane[oy * out_w + ox] = T::from_f64(top + wy * (bot - top));
                }
            }
        }
        let t = self.output("bilinear_resize", out, os)?;
        self.record(Step::BilinearResize { x: x.id(), out: t.id() });
        Ok(t)
    }
}

pub(super) fn backward<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let os = slots[out].shape;
    let ty = taps(os.h, xs.h);
    let tx = taps(os.w, xs.w);
    let dx = buf.entry(x, xs.numel());
    for nc in 0..xs.n * xs.c {
        let dplane = &mut dx[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
        let gplane = &dy[nc * os.h * os.w..(nc + 1) * os.h * os.w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = gplane[oy * os.w + ox].to_f64();
                let (wy, wx) = (wy, wx);
                dplane[y0 * xs.w + x0] += T::from_f64(g * (1.0 - wy) * (1.0 - wx));
                dplane[y0 * xs.w + x1] += T::from_f64(g * (1.0 - wy) * wx);
                dplane[y1 * xs.w + x0] += T::from_f64(g * wy * (1.0 - wx));
                dplane[y1 * xs.w + x1] += T::from_f64(g * wy * wx);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_stays_constant() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.4; 2 * 2 * 3 * 3], Shape::new(2, 2, 3, 3)).unwrap();
        let y = g.bilinear_resize(x, 7, 5).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 2, 7, 5));
        assert!(g.data(y).iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn two_x_upsample_closed_form() {
        // [0, 1] doubled along width -> [0, 0.25, 0.75, 1].
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0, 1.0], Shape::new(1, 1, 1, 2)).unwrap();
        let y = g.bilinear_resize(x, 1, 4).unwrap();
        let got = g.data(y);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15, "{got:?}");
        }
    }

    #[test]
    fn same_size_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.37).collect();
        let x = g.leaf(data.clone(), Shape::new(1, 1, 3, 4)).unwrap();
        let y = g.bilinear_resize(x, 3, 4).unwrap();
        for (a, b) in g.data(y).iter().zip(&data) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
