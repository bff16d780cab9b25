use super::conv::accumulate;
use crate::error::{Error, Result};
use crate::graph::{GradBuf, Graph, Slot, Step, Tensor, TensorId};
use crate::scalar::{gelu, gelu_grad, sigmoid, Scalar};
use crate::shape::Shape;

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a.n != b.n {
        return Err(Error::DimMismatch { op, axis: "batch", expected: a.n, got: b.n });
    }
    if a.c != b.c {
        return Err(Error::DimMismatch { op, axis: "channels", expected: a.c, got: b.c });
    }
    if a.h != b.h {
        return Err(Error::DimMismatch { op, axis: "height", expected: a.h, got: b.h });
    }
    if a.w != b.w {
        return Err(Error::DimMismatch { op, axis: "width", expected: a.w, got: b.w });
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn sigmoid(&mut self, x: Tensor) -> Result<Tensor> {
        let out: Vec<T> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let t = self.output("sigmoid", out, x.shape())?;
        self.record(Step::Sigmoid { x: x.id(), out: t.id() });
        Ok(t)
    }

    /// Exact erf-based GELU, x * Phi(x).
    pub fn gelu(&mut self, x: Tensor) -> Result<Tensor> {
        let out: Vec<T> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let t = self.output("gelu", out, x.shape())?;
        self.record(Step::Gelu { x: x.id(), out: t.id() });
        Ok(t)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("add", a.shape(), b.shape())?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = self.output("add", out, a.shape())?;
        self.record(Step::Add { a: a.id(), b: b.id(), out: t.id() });
        Ok(t)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("sub", a.shape(), b.shape())?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let t = self.output("sub", out, a.shape())?;
        self.record(Step::Sub { a: a.id(), b: b.id(), out: t.id() });
        Ok(t)
    }

    /// Elementwise (Hadamard) product. `b` may be a per-channel gate of
    /// shape (N,C,1,1), broadcast over the spatial axes of `a`.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        let broadcast = sb.h == 1 && sb.w == 1 && (sa.h != 1 || sa.w != 1);
        if broadcast {
            if sa.n != sb.n {
                return Err(Error::DimMismatch { op: "mul", axis: "batch", expected: sa.n, got: sb.n });
            }
            if sa.c != sb.c {
                return Err(Error::DimMismatch { op: "mul", axis: "channels", expected: sa.c, got: sb.c });
            }
        } else {
            same_shape("mul", sa, sb)?;
        }
        let hw = sa.h * sa.w;
        let a_data = self.data(a);
        let b_data = self.data(b);
        let mut out = vec![T::ZERO; sa.numel()];
        for nc in 0..sa.n * sa.c {
            if broadcast {
                let bv = b_data[nc];
                for i in 0..hw {
                    out[nc * hw + i] = a_data[nc * hw + i] * bv;
                }
            } else {
                for i in 0..hw {
                    out[nc * hw + i] = a_data[nc * hw + i] * b_data[nc * hw + i];
                }
            }
        }
        let t = self.output("mul", out, sa)?;
        self.record(Step::Mul { a: a.id(), b: b.id(), out: t.id() });
        Ok(t)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("div", a.shape(), b.shape())?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x / y)
            .collect();
        let t = self.output("div", out, a.shape())?;
        self.record(Step::Div { a: a.id(), b: b.id(), out: t.id() });
        Ok(t)
    }

    /// out = scale * x + shift.
    pub fn affine(&mut self, x: Tensor, scale: f64, shift: f64) -> Result<Tensor> {
        let (s, sh) = (T::from_f64(scale), T::from_f64(shift));
        let out: Vec<T> = self.data(x).iter().map(|&v| s * v + sh).collect();
        let t = self.output("affine", out, x.shape())?;
        self.record(Step::Affine { x: x.id(), out: t.id(), scale, shift });
        Ok(t)
    }

    /// Convex blend out = gate*a + (1-gate)*b, computed as b + gate*(a-b)
    /// in f64 and clamped to [min(a,b), max(a,b)] so the pointwise
    /// betweenness bound of a convex combination survives rounding.
    pub fn convex_blend(&mut self, gate: Tensor, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("convex_blend", gate.shape(), a.shape())?;
        same_shape("convex_blend", a.shape(), b.shape())?;
        let g_data = self.data(gate);
        let a_data = self.data(a);
        let b_data = self.data(b);
        let out: Vec<T> = (0..a_data.len())
            .map(|i| {
                let (gv, av, bv) = (g_data[i].to_f64(), a_data[i].to_f64(), b_data[i].to_f64());
                let blended = bv + gv * (av - bv);
                T::from_f64(blended.min(av.max(bv)).max(av.min(bv)))
            })
            .collect();
        let t = self.output("convex_blend", out, a.shape())?;
        self.record(Step::ConvexBlend { gate: gate.id(), a: a.id(), b: b.id(), out: t.id() });
        Ok(t)
    }

    /// Per-element binary cross-entropy of logits against a 0/1 target,
    /// in the stable form max(z,0) - z*y + ln(1 + exp(-|z|)). The target
    /// is treated as a constant; no gradient flows to it.
    pub fn bce_with_logits(&mut self, logits: Tensor, target: Tensor) -> Result<Tensor> {
        same_shape("bce_with_logits", logits.shape(), target.shape())?;
        let z = self.data(logits);
        let y = self.data(target);
        let out: Vec<T> = z
            .iter()
            .zip(y)
            .map(|(&z, &y)| z.maximum(T::ZERO) - z * y + (T::ONE + (-z.abs()).exp()).ln())
            .collect();
        let t = self.output("bce_with_logits", out, logits.shape())?;
        self.record(Step::BceWithLogits { logits: logits.id(), target: target.id(), out: t.id() });
        Ok(t)
    }
}

pub(super) fn backward_sigmoid<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let s = &slots[out].data;
    let dx = buf.entry(x, dy.len());
    for i in 0..dy.len() {
        dx[i] += dy[i] * s[i] * (T::ONE - s[i]);
    }
    Ok(())
}

pub(super) fn backward_gelu<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xv = &slots[x].data;
    let dx = buf.entry(x, dy.len());
    for i in 0..dy.len() {
        dx[i] += dy[i] * gelu_grad(xv[i]);
    }
    Ok(())
}

pub(super) fn backward_add<T: Scalar>(
    _slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    a: TensorId,
    b: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    accumulate(buf.entry(a, dy.len()), &dy);
    accumulate(buf.entry(b, dy.len()), &dy);
    Ok(())
}

pub(super) fn backward_sub<T: Scalar>(
    _slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    a: TensorId,
    b: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    accumulate(buf.entry(a, dy.len()), &dy);
    let db = buf.entry(b, dy.len());
    for i in 0..dy.len() {
        db[i] -= dy[i];
    }
    Ok(())
}

pub(super) fn backward_mul<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    a: TensorId,
    b: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let sa = slots[a].shape;
    let sb = slots[b].shape;
    let broadcast = sb.numel() != sa.numel();
    let hw = sa.h * sa.w;
    let a_data = &slots[a].data;
    let b_data = &slots[b].data;
    {
        let da = buf.entry(a, sa.numel());
        for nc in 0..sa.n * sa.c {
            for i in 0..hw {
                let bv = if broadcast { b_data[nc] } else { b_data[nc * hw + i] };
                da[nc * hw + i] += dy[nc * hw + i] * bv;
            }
        }
    }
    let db = buf.entry(b, sb.numel());
    for nc in 0..sa.n * sa.c {
        if broadcast {
            let mut acc = T::ZERO;
            for i in 0..hw {
                acc += dy[nc * hw + i] * a_data[nc * hw + i];
            }
            db[nc] += acc;
        } else {
            for i in 0..hw {
                db[nc * hw + i] += dy[nc * hw + i] * a_data[nc * hw + i];
            }
        }
    }
    Ok(())
}

pub(super) fn backward_div<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    a: TensorId,
    b: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let a_data = &slots[a].data;
    let b_data = &slots[b].data;
    {
        let da = buf.entry(a, dy.len());
        for i in 0..dy.len() {
            da[i] += dy[i] / b_data[i];
        }
    }
    let db = buf.entry(b, dy.len());
    for i in 0..dy.len() {
        db[i] -= dy[i] * a_data[i] / (b_data[i] * b_data[i]);
    }
    Ok(())
}

pub(super) fn backward_affine<T: Scalar>(
    _slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
    scale: f64,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let s = T::from_f64(scale);
    let dx = buf.entry(x, dy.len());
    for i in 0..dy.len() {
        dx[i] += dy[i] * s;
    }
    Ok(())
}

pub(super) fn backward_convex_blend<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    gate: TensorId,
    a: TensorId,
    b: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let g_data = &slots[gate].data;
    let a_data = &slots[a].data;
    let b_data = &slots[b].data;
    {
        let dg = buf.entry(gate, dy.len());
        for i in 0..dy.len() {
            dg[i] += dy[i] * (a_data[i] - b_data[i]);
        }
    }
    {
        let da = buf.entry(a, dy.len());
        for i in 0..dy.len() {
            da[i] += dy[i] * g_data[i];
        }
    }
    let db = buf.entry(b, dy.len());
    for i in 0..dy.len() {
        db[i] += dy[i] * (T::ONE - g_data[i]);
    }
    Ok(())
}

pub(super) fn backward_bce_with_logits<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    logits: TensorId,
    target: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let z = &slots[logits].data;
    let y = &slots[target].data;
    let dz = buf.entry(logits, dy.len());
    for i in 0..dy.len() {
        dz[i] += dy[i] * (sigmoid(z[i]) - y[i]);
    }
    Ok(())
}
