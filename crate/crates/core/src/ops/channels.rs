use super::conv::accumulate;
use crate::error::{Error, Result};
use crate::graph::{GradBuf, Graph, Slot, Step, Tensor, TensorId};
use crate::scalar::Scalar;
use crate::shape::Shape;

impl<T: Scalar> Graph<T> {
    /// Contiguous channel slice [c0, c0+len).
    pub fn narrow_channels(&mut self, x: Tensor, c0: usize, len: usize) -> Result<Tensor> {
        let xs = x.shape();
        if c0 + len > xs.c || len == 0 {
            return Err(Error::DimMismatch {
                op: "narrow_channels",
                axis: "channels",
                expected: xs.c,
                got: c0 + len,
            });
        }
        let os = Shape::new(xs.n, len, xs.h, xs.w);
        let hw = xs.h * xs.w;
        let data = self.data(x);
        let mut out = vec![T::ZERO; os.numel()];
        for n in 0..xs.n {
            let src = xs.at(n, c0, 0, 0);
            let dst = os.at(n, 0, 0, 0);
            out[dst..dst + len * hw].copy_from_slice(&data[src..src + len * hw]);
        }
        let t = self.output("narrow_channels", out, os)?;
        self.record(Step::NarrowChannels { x: x.id(), out: t.id(), c0 });
        Ok(t)
    }

    /// Even channel split into `parts` groups; concat of the result is the
    /// identity. Indivisible channel counts are an error.
    pub fn split_channels(&mut self, x: Tensor, parts: usize) -> Result<Vec<Tensor>> {
        let c = x.shape().c;
        if parts == 0 || c % parts != 0 {
            return Err(Error::Indivisible {
                op: "split_channels",
                what: "channels",
                value: c,
                divisor: parts.max(1),
            });
        }
        let group = c / parts;
        (0..parts)
            .map(|p| self.narrow_channels(x, p * group, group))
            .collect()
    }

    /// Channel concatenation; list order becomes channel order.
    pub fn concat_channels(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        let first = xs.first().ok_or_else(|| Error::config("concat_channels: empty input list"))?;
        let fs = first.shape();
        let mut c_total = 0;
        for x in xs {
            let s = x.shape();
            if s.n != fs.n {
                return Err(Error::DimMismatch { op: "concat_channels", axis: "batch", expected: fs.n, got: s.n });
            }
            if s.h != fs.h {
                return Err(Error::DimMismatch { op: "concat_channels", axis: "height", expected: fs.h, got: s.h });
            }
            if s.w != fs.w {
                return Err(Error::DimMismatch { op: "concat_channels", axis: "width", expected: fs.w, got: s.w });
            }
            c_total += s.c;
        }
        let os = Shape::new(fs.n, c_total, fs.h, fs.w);
        let hw = fs.h * fs.w;
        let mut out = vec![T::ZERO; os.numel()];
        let mut c_off = 0;
        for x in xs {
            let s = x.shape();
            let data = self.data(*x);
            for n in 0..s.n {
                let src = s.at(n, 0, 0, 0);
                let dst = os.at(n, c_off, 0, 0);
                out[dst..dst + s.c * hw].copy_from_slice(&data[src..src + s.c * hw]);
            }
            c_off += s.c;
        }
        let t = self.output("concat_channels", out, os)?;
        self.record(Step::ConcatChannels {
            xs: xs.iter().map(|x| x.id()).collect(),
            out: t.id(),
        });
        Ok(t)
    }
}

pub(super) fn backward_narrow<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
    c0: usize,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let os = slots[out].shape;
    let hw = xs.h * xs.w;
    let dx = buf.entry(x, xs.numel());
    for n in 0..xs.n {
        let dst = xs.at(n, c0, 0, 0);
        let src = os.at(n, 0, 0, 0);
        accumulate(&mut dx[dst..dst + os.c * hw], &dy[src..src + os.c * hw]);
    }
    Ok(())
}

pub(super) fn backward_concat<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    xs: &[TensorId],
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let os = slots[out].shape;
    let hw = os.h * os.w;
    let mut c_off = 0;
    for &xid in xs {
        let s = slots[xid].shape;
        let dx = buf.entry(xid, s.numel());
        for n in 0..s.n {
            let dst = s.at(n, 0, 0, 0);
            let src = os.at(n, c_off, 0, 0);
            accumulate(&mut dx[dst..dst + s.c * hw], &dy[src..src + s.c * hw]);
        }
        c_off += s.c;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_concat_round_trip_is_bitwise_identity() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..2 * 64 * 3 * 3).map(|i| (i as f64).sin()).collect();
        let x = g.leaf(data.clone(), Shape::new(2, 64, 3, 3)).unwrap();
        let parts = g.split_channels(x, 4).unwrap();
        assert_eq!(parts.len(), 4);
        for p in &parts {
            assert_eq!(p.shape(), Shape::new(2, 16, 3, 3));
        }
        let back = g.concat_channels(&parts).unwrap();
        assert_eq!(g.data(back), data.as_slice());
    }

    #[test]
    fn split_single_part_is_input() {
        let mut g: Graph<f64> = Graph::new();
        let data = vec![1.0, 2.0, 3.0, 4.0];
        let x = g.leaf(data.clone(), Shape::new(1, 1, 2, 2)).unwrap();
        let parts = g.split_channels(x, 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(g.data(parts[0]), data.as_slice());
    }

    #[test]
    fn indivisible_split_is_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0; 6], Shape::new(1, 6, 1, 1)).unwrap();
        assert!(matches!(
            g.split_channels(x, 4),
            Err(Error::Indivisible { what: "channels", value: 6, divisor: 4, .. })
        ));
    }

    #[test]
    fn concat_preserves_list_order() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![3.0; 4], Shape::new(1, 1, 2, 2)).unwrap();
        let b = g.leaf(vec![7.0; 4], Shape::new(1, 1, 2, 2)).unwrap();
        let y = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.data(y)[..4], [3.0; 4]);
        assert_eq!(g.data(y)[4..], [7.0; 4]);
    }

    #[test]
    fn concat_spatial_mismatch_is_error() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![0.0; 4], Shape::new(1, 1, 2, 2)).unwrap();
        let b = g.leaf(vec![0.0; 6], Shape::new(1, 1, 3, 2)).unwrap();
        assert!(matches!(
            g.concat_channels(&[a, b]),
            Err(Error::DimMismatch { axis: "height", .. })
        ));
    }
}
