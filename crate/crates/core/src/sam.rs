//! Selective aggregation: project the shallowest and deepest pyramid
//! features to a common width on the 1/4 grid, derive a per-channel
//! per-pixel sigmoid gate from both, and blend them convexly. High gate
//! values trust the shallow feature.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::ops::ConvParams;
use crate::params::{Init, ParamBinding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::shape::Shape;

const INIT_STD: f64 = 0.02;

pub struct SamGates {
    pub shallow_w: ParamId,
    pub shallow_b: ParamId,
    pub deep_w: ParamId,
    pub deep_b: ParamId,
}

pub struct SamBlock {
    pub proj_shallow_w: ParamId,
    pub proj_shallow_b: ParamId,
    pub proj_deep_w: ParamId,
    pub proj_deep_b: ParamId,
    /// None drops the selective gate: the block degrades to the plain
    /// feature addition it is meant to improve on.
    pub gates: Option<SamGates>,
    pub width: usize,
}

impl SamBlock {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        c_shallow: usize,
        c_deep: usize,
        width: usize,
        with_gates: bool,
    ) -> Result<Self> {
        let w = Init::TruncNormal { std: INIT_STD };
        let bias = Shape::new(1, width, 1, 1);
        let gates = if with_gates {
            Some(SamGates {
                shallow_w: store.register("sam.gate_s.w", Shape::new(width, width, 1, 1), w, rng)?,
                shallow_b: store.register("sam.gate_s.b", bias, Init::Zeros, rng)?,
                deep_w: store.register("sam.gate_d.w", Shape::new(width, width, 1, 1), w, rng)?,
                deep_b: store.register("sam.gate_d.b", bias, Init::Zeros, rng)?,
            })
        } else {
            None
        };
        Ok(SamBlock {
            proj_shallow_w: store.register("sam.proj_s.w", Shape::new(width, c_shallow, 1, 1), w, rng)?,
            proj_shallow_b: store.register("sam.proj_s.b", bias, Init::Zeros, rng)?,
            proj_deep_w: store.register("sam.proj_d.w", Shape::new(width, c_deep, 1, 1), w, rng)?,
            proj_deep_b: store.register("sam.proj_d.b", bias, Init::Zeros, rng)?,
            gates,
            width,
        })
    }

    /// Bring both streams onto the shallow (1/4) grid at the common width:
    /// the deep feature is upsampled, never the shallow one downsampled,
    /// because the block exists to preserve boundary detail.
    pub fn align<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        x1: Tensor,
        x4: Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let target = x1.shape();
        if x4.shape().n != target.n {
            return Err(Error::DimMismatch {
                op: "sam_align",
                axis: "batch",
                expected: target.n,
                got: x4.shape().n,
            });
        }
        let ps = ConvParams::new(bind.get(self.proj_shallow_w), Some(bind.get(self.proj_shallow_b)), 1, 0, 1);
        let h1 = g.conv2d(x1, &ps)?;
        let up = g.bilinear_resize(x4, target.h, target.w)?;
        let pd = ConvParams::new(bind.get(self.proj_deep_w), Some(bind.get(self.proj_deep_b)), 1, 0, 1);
        let h4 = g.conv2d(up, &pd)?;
        Ok((h1, h4))
    }

    /// sigma = sigmoid(gate_s(h1) + gate_d(h4)); out = sigma*h1 + (1-sigma)*h4.
    /// Without gates: out = h1 + h4.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        h1: Tensor,
        h4: Tensor,
    ) -> Result<Tensor> {
        match &self.gates {
            Some(gates) => {
                let gs = ConvParams::new(bind.get(gates.shallow_w), Some(bind.get(gates.shallow_b)), 1, 0, 1);
                let gd = ConvParams::new(bind.get(gates.deep_w), Some(bind.get(gates.deep_b)), 1, 0, 1);
                let zs = g.conv2d(h1, &gs)?;
                let zd = g.conv2d(h4, &gd)?;
                let z = g.add(zs, zd)?;
                let sigma = g.sigmoid(z)?;
                g.convex_blend(sigma, h1, h4)
            }
            None => g.add(h1, h4),
        }
    }
}
