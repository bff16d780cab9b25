use crate::error::{Error, Result};
use crate::graph::{GradBuf, Graph, Slot, Step, Tensor, TensorId};
use crate::scalar::Scalar;
use crate::shape::Shape;

// Token tensors reuse the NCHW container as (batch, group/head, token, feature).

impl<T: Scalar> Graph<T> {
    /// (N,C,H,W) -> (N,1,H*W,C): channels become the token feature axis.
    pub fn to_tokens(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let os = Shape::new(xs.n, 1, xs.h * xs.w, xs.c);
        let data = self.data(x);
        let mut out = vec![T::ZERO; os.numel()];
        for n in 0..xs.n {
            for c in 0..xs.c {
                for h in 0..xs.h {
                    for w in 0..xs.w {
                        out[os.at(n, 0, h * xs.w + w, c)] = data[xs.at(n, c, h, w)];
                    }
                }
            }
        }
        let t = self.output("to_tokens", out, os)?;
        self.record(Step::ToTokens { x: x.id(), out: t.id() });
        Ok(t)
    }

    /// (N,1,L,C) -> (N,C,h,w); requires L == h*w.
    pub fn from_tokens(&mut self, x: Tensor, h: usize, w: usize) -> Result<Tensor> {
        let xs = x.shape();
        if xs.c != 1 {
            return Err(Error::DimMismatch { op: "from_tokens", axis: "channels", expected: 1, got: xs.c });
        }
        if xs.h != h * w {
            return Err(Error::DimMismatch { op: "from_tokens", axis: "height", expected: h * w, got: xs.h });
        }
        let os = Shape::new(xs.n, xs.w, h, w);
        let data = self.data(x);
        let mut out = vec![T::ZERO; os.numel()];
        for n in 0..os.n {
            for c in 0..os.c {
                for y in 0..h {
                    for z in 0..w {
                        out[os.at(n, c, y, z)] = data[xs.at(n, 0, y * w + z, c)];
                    }
                }
            }
        }
        let t = self.output("from_tokens", out, os)?;
        self.record(Step::FromTokens { x: x.id(), out: t.id() });
        Ok(t)
    }

    /// (N,1,L,C) -> (N,heads,L,C/heads).
    pub fn split_heads(&mut self, x: Tensor, heads: usize) -> Result<Tensor> {
        let xs = x.shape();
        if xs.c != 1 {
            return Err(Error::DimMismatch { op: "split_heads", axis: "channels", expected: 1, got: xs.c });
        }
        if heads == 0 || xs.w % heads != 0 {
            return Err(Error::Indivisible {
                op: "split_heads",
                what: "features",
                value: xs.w,
                divisor: heads.max(1),
            });
        }
        let d = xs.w / heads;
        let os = Shape::new(xs.n, heads, xs.h, d);
        let data = self.data(x);
        let mut out = vec![T::ZERO; os.numel()];
        for n in 0..xs.n {
            for hd in 0..heads {
                for l in 0..xs.h {
                    for f in 0..d {
                        out[os.at(n, hd, l, f)] = data[xs.at(n, 0, l, hd * d + f)];
                    }
                }
            }
        }
        let t = self.output("split_heads", out, os)?;
        self.record(Step::SplitHeads { x: x.id(), out: t.id() });
        Ok(t)
    }

    /// (N,heads,L,D) -> (N,1,L,heads*D).
    pub fn merge_heads(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let os = Shape::new(xs.n, 1, xs.h, xs.c * xs.w);
        let data = self.data(x);
        let mut out = vec![T::ZERO; os.numel()];
        for n in 0..xs.n {
            for hd in 0..xs.c {
                for l in 0..xs.h {
                    for f in 0..xs.w {
                        out[os.at(n, 0, l, hd * xs.w + f)] = data[xs.at(n, hd, l, f)];
                    }
                }
            }
        }
        let t = self.output("merge_heads", out, os)?;
        self.record(Step::MergeHeads { x: x.id(), out: t.id() });
        Ok(t)
    }

    /// Per-token linear map: x (N,G,L,Ci), weight (1,1,Co,Ci), bias (1,1,1,Co).
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        let (co, ci) = (ws.h, ws.w);
        if xs.w != ci {
            return Err(Error::DimMismatch { op: "linear", axis: "width", expected: ci, got: xs.w });
        }
        if let Some(b) = b {
            if b.shape().numel() != co {
                return Err(Error::DimMismatch { op: "linear", axis: "width", expected: co, got: b.shape().numel() });
            }
        }
        let os = Shape::new(xs.n, xs.c, xs.h, co);
        let rows = xs.n * xs.c * xs.h;
        let x_data = self.data(x);
        let w_data = self.data(w);
        let b_data = b.map(|b| self.data(b).to_vec());
        let mut out = vec![T::ZERO; os.numel()];
        for r in 0..rows {
            let xrow = &x_data[r * ci..(r + 1) * ci];
            let orow = &mut out[r * co..(r + 1) * co];
            for o in 0..co {
                let wrow = &w_data[o * ci..(o + 1) * ci];
                let mut acc = match &b_data {
                    Some(bv) => bv[o],
                    None => T::ZERO,
                };
                for i in 0..ci {
                    acc += xrow[i] * wrow[i];
                }
                orow[o] = acc;
            }
        }
        let t = self.output("linear", out, os)?;
        self.record(Step::Linear {
            x: x.id(),
            w: w.id(),
            b: b.map(|b| b.id()),
            out: t.id(),
        });
        Ok(t)
    }

    /// Batched matmul (N,G,M,K) x (N,G,K,P) -> (N,G,M,P).
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.n != sb.n {
            return Err(Error::DimMismatch { op: "matmul", axis: "batch", expected: sa.n, got: sb.n });
        }
        if sa.c != sb.c {
            return Err(Error::DimMismatch { op: "matmul", axis: "channels", expected: sa.c, got: sb.c });
        }
        if sa.w != sb.h {
            return Err(Error::DimMismatch { op: "matmul", axis: "height", expected: sa.w, got: sb.h });
        }
        let (m, k, p) = (sa.h, sa.w, sb.w);
        let os = Shape::new(sa.n, sa.c, m, p);
        let a_data = self.data(a);
        let b_data = self.data(b);
        let mut out = vec![T::ZERO; os.numel()];
        for gidx in 0..sa.n * sa.c {
            let abase = gidx * m * k;
            let bbase = gidx * k * p;
            let obase = gidx * m * p;
            for i in 0..m {
                for kk in 0..k {
                    let av = a_data[abase + i * k + kk];
                    let brow = &b_data[bbase + kk * p..bbase + (kk + 1) * p];
                    let orow = &mut out[obase + i * p..obase + (i + 1) * p];
                    for j in 0..p {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let t = self.output("matmul", out, os)?;
        self.record(Step::MatmulNN { a: a.id(), b: b.id(), out: t.id() });
        Ok(t)
    }

    /// Batched matmul with transposed rhs: (N,G,M,K) x (N,G,P,K) -> (N,G,M,P).
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.n != sb.n {
            return Err(Error::DimMismatch { op: "matmul_nt", axis: "batch", expected: sa.n, got: sb.n });
        }
        if sa.c != sb.c {
            return Err(Error::DimMismatch { op: "matmul_nt", axis: "channels", expected: sa.c, got: sb.c });
        }
        if sa.w != sb.w {
            return Err(Error::DimMismatch { op: "matmul_nt", axis: "width", expected: sa.w, got: sb.w });
        }
        let (m, k, p) = (sa.h, sa.w, sb.h);
        let os = Shape::new(sa.n, sa.c, m, p);
        let a_data = self.data(a);
        let b_data = self.data(b);
        let mut out = vec![T::ZERO; os.numel()];
        for gidx in 0..sa.n * sa.c {
            let abase = gidx * m * k;
            let bbase = gidx * p * k;
            let obase = gidx * m * p;
            for i in 0..m {
                let arow = &a_data[abase + i * k..abase + (i + 1) * k];
                let orow = &mut out[obase + i * p..obase + (i + 1) * p];
                for j in 0..p {
                    let brow = &b_data[bbase + j * k..bbase + (j + 1) * k];
                    let mut acc = T::ZERO;
                    for kk in 0..k {
                        acc += arow[kk] * brow[kk];
                    }
                    orow[j] = acc;
                }
            }
        }
        let t = self.output("matmul_nt", out, os)?;
        self.record(Step::MatmulNT { a: a.id(), b: b.id(), out: t.id() });
        Ok(t)
    }

    /// Softmax over the last axis; each row sums to 1.
    pub fn softmax_last(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let cols = xs.w;
        let rows = xs.numel() / cols;
        let data = self.data(x);
        let mut out = vec![T::ZERO; xs.numel()];
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut denom = T::ZERO;
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                denom += e;
            }
            let inv = T::ONE / denom;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let t = self.output("softmax_last", out, xs)?;
        self.record(Step::SoftmaxLast { x: x.id(), out: t.id() });
        Ok(t)
    }

    /// LayerNorm over the last axis with learnable gamma/beta of shape
    /// (1,1,1,C). Uses the biased variance, matching transformer practice.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let xs = x.shape();
        let c = xs.w;
        if gamma.shape().numel() != c {
            return Err(Error::DimMismatch { op: "layer_norm", axis: "width", expected: c, got: gamma.shape().numel() });
        }
        if beta.shape().numel() != c {
            return Err(Error::DimMismatch { op: "layer_norm", axis: "width", expected: c, got: beta.shape().numel() });
        }
        let rows = xs.numel() / c;
        let x_data = self.data(x);
        let g_data = self.data(gamma).to_vec();
        let b_data = self.data(beta).to_vec();
        let inv_c = T::from_f64(1.0 / c as f64);
        let epst = T::from_f64(eps);
        let mut out = vec![T::ZERO; xs.numel()];
        for r in 0..rows {
            let row = &x_data[r * c..(r + 1) * c];
            let orow = &mut out[r * c..(r + 1) * c];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::ONE / (var + epst).sqrt();
            for i in 0..c {
                orow[i] = g_data[i] * ((row[i] - mean) * inv_std) + b_data[i];
            }
        }
        let t = self.output("layer_norm", out, xs)?;
        self.record(Step::LayerNorm {
            x: x.id(),
            gamma: gamma.id(),
            beta: beta.id(),
            out: t.id(),
            eps,
        });
        Ok(t)
    }
}

pub(super) fn backward_to_tokens<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let os = slots[out].shape;
    let dx = buf.entry(x, xs.numel());
    for n in 0..xs.n {
        for c in 0..xs.c {
            for h in 0..xs.h {
                for w in 0..xs.w {
                    dx[xs.at(n, c, h, w)] += dy[os.at(n, 0, h * xs.w + w, c)];
                }
            }
        }
    }
    Ok(())
}

pub(super) fn backward_from_tokens<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let os = slots[out].shape;
    let dx = buf.entry(x, xs.numel());
    for n in 0..os.n {
        for c in 0..os.c {
            for y in 0..os.h {
                for z in 0..os.w {
                    dx[xs.at(n, 0, y * os.w + z, c)] += dy[os.at(n, c, y, z)];
                }
            }
        }
    }
    Ok(())
}

pub(super) fn backward_split_heads<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let os = slots[out].shape;
    let d = os.w;
    let dx = buf.entry(x, xs.numel());
    for n in 0..os.n {
        for hd in 0..os.c {
            for l in 0..os.h {
                for f in 0..d {
                    dx[xs.at(n, 0, l, hd * d + f)] += dy[os.at(n, hd, l, f)];
                }
            }
        }
    }
    Ok(())
}

pub(super) fn backward_merge_heads<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let os = slots[out].shape;
    let dx = buf.entry(x, xs.numel());
    for n in 0..xs.n {
        for hd in 0..xs.c {
            for l in 0..xs.h {
                for f in 0..xs.w {
                    dx[xs.at(n, hd, l, f)] += dy[os.at(n, 0, l, hd * xs.w + f)];
                }
            }
        }
    }
    Ok(())
}

pub(super) fn backward_linear<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    w: TensorId,
    b: Option<TensorId>,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let ws = slots[w].shape;
    let (co, ci) = (ws.h, ws.w);
    let rows = xs.n * xs.c * xs.h;
    let x_data = &slots[x].data;
    let w_data = &slots[w].data;

    {
        let dx = buf.entry(x, xs.numel());
        for r in 0..rows {
            let grow = &dy[r * co..(r + 1) * co];
            let xrow = &mut dx[r * ci..(r + 1) * ci];
            for o in 0..co {
                let gv = grow[o];
                let wrow = &w_data[o * ci..(o + 1) * ci];
                for i in 0..ci {
                    xrow[i] += gv * wrow[i];
                }
            }
        }
    }
    {
        let dw = buf.entry(w, ws.numel());
        for r in 0..rows {
            let grow = &dy[r * co..(r + 1) * co];
            let xrow = &x_data[r * ci..(r + 1) * ci];
            for o in 0..co {
                let gv = grow[o];
                let wrow = &mut dw[o * ci..(o + 1) * ci];
                for i in 0..ci {
                    wrow[i] += gv * xrow[i];
                }
            }
        }
    }
    if let Some(bid) = b {
        let db = buf.entry(bid, co);
        for r in 0..rows {
            let grow = &dy[r * co..(r + 1) * co];
            for o in 0..co {
                db[o] += grow[o];
            }
        }
    }
    Ok(())
}

pub(super) fn backward_matmul_nn<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    a: TensorId,
    b: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let sa = slots[a].shape;
    let sb = slots[b].shape;
    let (m, k, p) = (sa.h, sa.w, sb.w);
    let a_data = &slots[a].data;
    let b_data = &slots[b].data;
    {
        // da = dy . b^T
        let da = buf.entry(a, sa.numel());
        for gidx in 0..sa.n * sa.c {
            let (gb, bb, ab) = (gidx * m * p, gidx * k * p, gidx * m * k);
            for i in 0..m {
                let grow = &dy[gb + i * p..gb + (i + 1) * p];
                for kk in 0..k {
                    let brow = &b_data[bb + kk * p..bb + (kk + 1) * p];
                    let mut acc = T::ZERO;
                    for j in 0..p {
                        acc += grow[j] * brow[j];
                    }
                    da[ab + i * k + kk] += acc;
                }
            }
        }
    }
    {
        // db = a^T . dy
        let db = buf.entry(b, sb.numel());
        for gidx in 0..sa.n * sa.c {
            let (gb, bb, ab) = (gidx * m * p, gidx * k * p, gidx * m * k);
            for i in 0..m {
                let grow = &dy[gb + i * p..gb + (i + 1) * p];
                for kk in 0..k {
                    let av = a_data[ab + i * k + kk];
                    let brow = &mut db[bb + kk * p..bb + (kk + 1) * p];
                    for j in 0..p {
                        brow[j] += av * grow[j];
                    }
                }
            }
        }
    }
    Ok(())
}

pub(super) fn backward_matmul_nt<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    a: TensorId,
    b: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let sa = slots[a].shape;
    let sb = slots[b].shape;
    let (m, k, p) = (sa.h, sa.w, sb.h);
    let a_data = &slots[a].data;
    let b_data = &slots[b].data;
    {
        // da = dy . b
        let da = buf.entry(a, sa.numel());
        for gidx in 0..sa.n * sa.c {
            let (gb, bb, ab) = (gidx * m * p, gidx * p * k, gidx * m * k);
            for i in 0..m {
                let grow = &dy[gb + i * p..gb + (i + 1) * p];
                let arow = &mut da[ab + i * k..ab + (i + 1) * k];
                for j in 0..p {
                    let gv = grow[j];
                    let brow = &b_data[bb + j * k..bb + (j + 1) * k];
                    for kk in 0..k {
                        arow[kk] += gv * brow[kk];
                    }
                }
            }
        }
    }
    {
        // db = dy^T . a
        let db = buf.entry(b, sb.numel());
        for gidx in 0..sa.n * sa.c {
            let (gb, bb, ab) = (gidx * m * p, gidx * p * k, gidx * m * k);
            for i in 0..m {
                let grow = &dy[gb + i * p..gb + (i + 1) * p];
                let arow = &a_data[ab + i * k..ab + (i + 1) * k];
                for j in 0..p {
                    let gv = grow[j];
                    let brow = &mut db[bb + j * k..bb + (j + 1) * k];
                    for kk in 0..k {
                        brow[kk] += gv * arow[kk];
                    }
                }
            }
        }
    }
    Ok(())
}

pub(super) fn backward_softmax<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    out: TensorId,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let cols = xs.w;
    let rows = xs.numel() / cols;
    let s = &slots[out].data;
    let dx = buf.entry(x, xs.numel());
    for r in 0..rows {
        let srow = &s[r * cols..(r + 1) * cols];
        let grow = &dy[r * cols..(r + 1) * cols];
        let mut dot = T::ZERO;
        for i in 0..cols {
            dot += srow[i] * grow[i];
        }
        let xrow = &mut dx[r * cols..(r + 1) * cols];
        for i in 0..cols {
            xrow[i] += srow[i] * (grow[i] - dot);
        }
    }
    Ok(())
}

pub(super) fn backward_layer_norm<T: Scalar>(
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    out: TensorId,
    eps: f64,
) -> Result<()> {
    let Some(dy) = buf.take(out) else { return Ok(()) };
    let xs = slots[x].shape;
    let c = xs.w;
    let rows = xs.numel() / c;
    let x_data = &slots[x].data;
    let g_data = &slots[gamma].data;
    let inv_c = T::from_f64(1.0 / c as f64);
    let epst = T::from_f64(eps);

    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    {
        let dx = buf.entry(x, xs.numel());
        let mut xhat = vec![T::ZERO; c];
        let mut h = vec![T::ZERO; c];
        for r in 0..rows {
            let row = &x_data[r * c..(r + 1) * c];
            let grow = &dy[r * c..(r + 1) * c];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::ONE / (var + epst).sqrt();

            let mut m1 = T::ZERO;
            let mut m2 = T::ZERO;
            for i in 0..c {
                xhat[i] = (row[i] - mean) * inv_std;
                h[i] = g_data[i] * grow[i];
                m1 += h[i];
                m2 += h[i] * xhat[i];
                dgamma[i] += grow[i] * xhat[i];
                dbeta[i] += grow[i];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            let xrow = &mut dx[r * c..(r + 1) * c];
            for i in 0..c {
                xrow[i] += (h[i] - m1 - xhat[i] * m2) * inv_std;
            }
        }
    }
    super::conv::accumulate(buf.entry(gamma, c), &dgamma);
    super::conv::accumulate(buf.entry(beta, c), &dbeta);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_round_trip_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.01).collect();
        let x = g.leaf(data.clone(), Shape::new(2, 3, 4, 5)).unwrap();
        let tok = g.to_tokens(x).unwrap();
        assert_eq!(tok.shape(), Shape::new(2, 1, 20, 3));
        let back = g.from_tokens(tok, 4, 5).unwrap();
        assert_eq!(g.data(back), data.as_slice());
    }

    #[test]
    fn head_split_merge_round_trip() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..1 * 1 * 6 * 8).map(|i| (i as f64).cos()).collect();
        let x = g.leaf(data.clone(), Shape::new(1, 1, 6, 8)).unwrap();
        let split = g.split_heads(x, 4).unwrap();
        assert_eq!(split.shape(), Shape::new(1, 4, 6, 2));
        let merged = g.merge_heads(split).unwrap();
        assert_eq!(g.data(merged), data.as_slice());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 1.7).sin() * 5.0).collect();
        let x = g.leaf(data, Shape::new(1, 2, 3, 4)).unwrap();
        let s = g.softmax_last(x).unwrap();
        let out = g.data(s);
        for r in 0..6 {
            let sum: f64 = out[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..8).map(|i| i as f64 * 3.0 + 1.0).collect();
        let x = g.leaf(data, Shape::new(1, 1, 2, 4)).unwrap();
        let gamma = g.leaf(vec![1.0; 4], Shape::new(1, 1, 1, 4)).unwrap();
        let beta = g.leaf(vec![0.0; 4], Shape::new(1, 1, 1, 4)).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        let out = g.data(y);
        for r in 0..2 {
            let row = &out[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn matmul_against_hand_product() {
        let mut g: Graph<f64> = Graph::new();
        // [1 2; 3 4] x [5 6; 7 8] = [19 22; 43 50]
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], Shape::new(1, 1, 2, 2)).unwrap();
        let b = g.leaf(vec![5.0, 6.0, 7.0, 8.0], Shape::new(1, 1, 2, 2)).unwrap();
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.data(y), &[19.0, 22.0, 43.0, 50.0]);
        // NT variant against the transposed rhs
        let bt = g.leaf(vec![5.0, 7.0, 6.0, 8.0], Shape::new(1, 1, 2, 2)).unwrap();
        let y2 = g.matmul_nt(a, bt).unwrap();
        assert_eq!(g.data(y2), &[19.0, 22.0, 43.0, 50.0]);
    }
}
