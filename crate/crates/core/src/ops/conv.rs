use crate::error::{Error, Result};
use crate::graph::{GradBuf, Graph, Slot, Step, Tensor, TensorId};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Convolution parameters. Weight layout is (C_out, C_in/groups, k, k);
/// bias, when present, is (1, C_out, 1, 1).
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            weight,
            bias,
            stride,
            padding,
            groups,
        }
    }

    /// Stride-1 "same" depthwise convolution (groups == C_in == C_out).
    /// Rejects even kernels: same-padding needs (k-1)/2 on both sides.
    pub fn depthwise(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let k = weight.shape().h;
        if k % 2 == 0 {
            return Err(Error::EvenKernel {
                op: "depthwise",
                k,
            });
        }
        if weight.shape().c != 1 {
            return Err(Error::DimMismatch {
                op: "depthwise",
                axis: "channels",
                expected: 1,
                got: weight.shape().c,
            });
        }
        Ok(ConvParams {
            weight,
            bias,
            stride: 1,
            padding: (k - 1) / 2,
            groups: weight.shape().n,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c * self.groups
    }
}

/// Valid output range along one axis: all `o` with
/// 0 <= o*stride + k_off - pad < in_len.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let off = k_off as isize - pad as isize;
    let lo = if off < 0 {
        (((-off) as usize) + stride - 1) / stride
    } else {
        0
    };
    let hi_num = in_len as isize - 1 - off;
    if hi_num < 0 || lo >= out_len {
        return (1, 0); // empty
    }
    let hi = (hi_num as usize / stride).min(out_len - 1);
    (lo, hi)
}

impl<T: Scalar> Graph<T> {
    /// Direct 2-D convolution. Output shape
    /// (N, C_out, (H+2p-k)/s + 1, (W+2p-k)/s + 1), differentiable w.r.t.
    /// input, weight and bias.
    pub fn conv2d(&mut self, x: Tensor, p: &ConvParams) -> Result<Tensor> {
        let xs = x.shape();
        let ws = p.weight.shape();
        let (c_out, k) = (ws.n, ws.h);
        if ws.h != ws.w {
            return Err(Error::DimMismatch {
                op: "conv2d",
                axis: "width",
                expected: ws.h,
                got: ws.w,
            });
        }
        if p.groups == 0 || p.stride == 0 {
            return Err(Error::config("conv2d: stride and groups must be positive"));
        }
        if xs.c != ws.c * p.groups {
            return Err(Error::DimMismatch {
                op: "conv2d",
                axis: "channels",
                expected: ws.c * p.groups,
                got: xs.c,
            });
        }
        if xs.c % p.groups != 0 {
            return Err(Error::Indivisible {
                op: "conv2d",
                what: "input channels",
                value: xs.c,
                divisor: p.groups,
            });
        }
        if c_out % p.groups != 0 {
            return Err(Error::Indivisible {
                op: "conv2d",
                what: "output channels",
                value: c_out,
                divisor: p.groups,
            });
        }
        if xs.h + 2 * p.padding < k {
            return Err(Error::DimMismatch {
                op: "conv2d",
                axis: "height",
                expected: k,
                got: xs.h + 2 * p.padding,
            });
        }
        if xs.w + 2 * p.padding < k {
            return Err(Error::DimMismatch {
                op: "conv2d",
                axis: "width",
                expected: k,
                got: xs.w + 2 * p.padding,
            });
        }
        if let Some(b) = p.bias {
            if b.shape().numel() != c_out {
                return Err(Error::DimMismatch {
                    op: "conv2d",
                    axis: "channels",
                    expected: c_out,
                    got: b.shape().numel(),
                });
            }
        }

        let h_out = (xs.h + 2 * p.padding - k) / p.stride + 1;
        let w_out = (xs.w + 2 * p.padding - k) / p.stride + 1;
        let os = Shape::new(xs.n, c_out, h_out, w_out);

        let out = forward(
            self.data(x),
            xs,
            self.data(p.weight),
            ws,
            p.bias.map(|b| self.data(b).to_vec()),
            os,
            p.stride,
            p.padding,
            p.groups,
        );
        let t = self.output("conv2d", out, os)?;
        self.record(Step::Conv2d {
            x: x.id(),
            w: p.weight.id(),
            b: p.bias.map(|b| b.id()),
            out: t.id(),
            stride: p.stride,
            padding: p.padding,
            groups: p.groups,
        });
        Ok(t)
    }

    /// Depthwise stage of a separable convolution: stride-1 "same" conv
    /// with groups == C. Shape-preserving for odd k.
    pub fn depthwise_conv(&mut self, x: Tensor, weight: Tensor, bias: Option<Tensor>) -> Result<Tensor> {
        let p = ConvParams::depthwise(weight, bias)?;
        self.conv2d(x, &p)
    }
}

#[allow(clippy::too_many_arguments)]
fn forward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<Vec<T>>,
    os: Shape,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<T> {
    let (k, cpg_in, cpg_out) = (ws.h, ws.c, os.c / groups);
    let mut out = vec![T::ZERO; os.numel()];

    for n in 0..xs.n {
        for co in 0..os.c {
            let g = co / cpg_out;
            if let Some(b) = &bias {
                let bv = b[co];
                out[os.at(n, co, 0, 0)..os.at(n, co, 0, 0) + os.h * os.w].fill(bv);
            }
            for cil in 0..cpg_in {
                let ci = g * cpg_in + cil;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(os.h, xs.h, stride, kh, pad);
                    for kw in 0..k {
                        let wv = w[ws.at(co, cil, kh, kw)];
                        let (ow_lo, ow_hi) = valid_range(os.w, xs.w, stride, kw, pad);
                        if oh_lo > oh_hi || ow_lo > ow_hi {
                            continue;
                        }
                        for oh in oh_lo..=oh_hi {
                            let ih = (oh * stride + kh) - pad;
                            let x_base = xs.at(n, ci, ih, 0);
                            let o_base = os.at(n, co, oh, 0);
                            for ow in ow_lo..=ow_hi {
                                let iw = (ow * stride + kw) - pad;
                                out[o_base + ow] += wv * x[x_base + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    w: TensorId,
    b: Option<TensorId>,
    out: TensorId,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<()> {
    let Some(dy) = buf.take(out) else {
        return Ok(());
    };
    let xs = slots[x].shape;
    let ws = slots[w].shape;
    let os = slots[out].shape;
    let (k, cpg_in, cpg_out) = (ws.h, ws.c, os.c / groups);
    let x_data = &slots[x].data;
    let w_data = &slots[w].data;

    let mut dx = vec![T::ZERO; xs.numel()];
    let mut dw = vec![T::ZERO; ws.numel()];
    let mut db = vec![T::ZERO; os.c];

    for n in 0..xs.n {
        for co in 0..os.c {
            let g = co / cpg_out;
            if b.is_some() {
                let mut acc = T::ZERO;
                let base = os.at(n, co, 0, 0);
                for v in &dy[base..base + os.h * os.w] {
                    acc += *v;
                }
                db[co] += acc;
            }
            for cil in 0..cpg_in {
                let ci = g * cpg_in + cil;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(os.h, xs.h, stride, kh, pad);
                    for kw in 0..k {
                        let wv = w_data[ws.at(co, cil, kh, kw)];
                        let (ow_lo, ow_hi) = valid_range(os.w, xs.w, stride, kw, pad);
                        if oh_lo > oh_hi || ow_lo > ow_hi {
                            continue;
                        }
                        let mut acc_dw = T::ZERO;
                        for oh in oh_lo..=oh_hi {
                            let ih = (oh * stride + kh) - pad;
                            let x_base = xs.at(n, ci, ih, 0);
                            let o_base = os.at(n, co, oh, 0);
                            for ow in ow_lo..=ow_hi {
                                let iw = (ow * stride + kw) - pad;
                                let gval = dy[o_base + ow];
                                dx[x_base + iw] += wv * gval;
                                acc_dw += x_data[x_base + iw] * gval;
                            }
                        }
                        dw[ws.at(co, cil, kh, kw)] += acc_dw;
                    }
                }
            }
        }
    }

    accumulate(buf.entry(x, xs.numel()), &dx);
    accumulate(buf.entry(w, ws.numel()), &dw);
    if let Some(bid) = b {
        accumulate(buf.entry(bid, os.c), &db);
    }
    Ok(())
}

#[inline]
pub(super) fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn identity_1x1_conv_preserves_input() {
        let mut g = graph();
        let x = g
            .leaf((0..24).map(|v| v as f64 * 0.5 - 3.0).collect(), Shape::new(1, 3, 2, 4))
            .unwrap();
        // weight = identity over channels
        let mut wdata = vec![0.0; 9];
        for c in 0..3 {
            wdata[c * 3 + c] = 1.0;
        }
        let w = g.leaf(wdata, Shape::new(3, 3, 1, 1)).unwrap();
        let b = g.leaf(vec![0.0; 3], Shape::new(1, 3, 1, 1)).unwrap();
        let p = ConvParams::new(w, Some(b), 1, 0, 1);
        let y = g.conv2d(x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn depthwise_ones_kernel_counts_neighbors() {
        // 3x3 all-ones depthwise kernel, padding 1, constant input v:
        // interior 9v, edges 6v, corners 4v.
        let v = 2.5;
        let mut g = graph();
        let x = g.leaf(vec![v; 16], Shape::new(1, 1, 4, 4)).unwrap();
        let w = g.leaf(vec![1.0; 9], Shape::new(1, 1, 3, 3)).unwrap();
        let p = ConvParams::depthwise(w, None).unwrap();
        let y = g.conv2d(x, &p).unwrap();
        let out = g.data(y);
        let s = Shape::new(1, 1, 4, 4);
        for h in 0..4 {
            for w_ in 0..4 {
                let edge_h = h == 0 || h == 3;
                let edge_w = w_ == 0 || w_ == 3;
                let expect = match (edge_h, edge_w) {
                    (true, true) => 4.0 * v,
                    (false, false) => 9.0 * v,
                    _ => 6.0 * v,
                };
                assert!((out[s.at(0, 0, h, w_)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let mut g = graph();
        let x = g.leaf(vec![0.0; 8], Shape::new(1, 2, 2, 2)).unwrap();
        let w = g.leaf(vec![0.0; 3], Shape::new(1, 3, 1, 1)).unwrap();
        let p = ConvParams::new(w, None, 1, 0, 1);
        let err = g.conv2d(x, &p).unwrap_err();
        match err {
            Error::DimMismatch { axis, expected, got, .. } => {
                assert_eq!(axis, "channels");
                assert_eq!(expected, 3);
                assert_eq!(got, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn even_depthwise_kernel_rejected() {
        let mut g = graph();
        let w = g.leaf(vec![0.0; 16], Shape::new(1, 1, 4, 4)).unwrap();
        assert!(matches!(
            ConvParams::depthwise(w, None),
            Err(Error::EvenKernel { k: 4, .. })
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut g = graph();
        let x = g.leaf(vec![0.0; 4 * 64], Shape::new(1, 4, 8, 8)).unwrap();
        let w = g.leaf(vec![0.3; 4 * 9], Shape::new(4, 1, 3, 3)).unwrap();
        let b = g.leaf(vec![0.0; 4], Shape::new(1, 4, 1, 1)).unwrap();
        let p = ConvParams::depthwise(w, Some(b)).unwrap();
        let y = g.conv2d(x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 8, 8));
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }
}
