//! Hierarchical pyramid transformer encoder. Four stages of strided
//! overlapping patch embedding plus spatial-reduction attention blocks,
//! producing feature maps at 1/4, 1/8, 1/16 and 1/32 of the input with
//! widening channels.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::ops::ConvParams;
use crate::params::{Init, ParamBinding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Per-stage patch embedding strides; the product (32) fixes the input
/// divisibility requirement and the 1/4..1/32 pyramid law.
pub const PATCH_STRIDES: [usize; 4] = [4, 2, 2, 2];
/// Overlapping patch kernels: 2*stride - 1, "same"-aligned via (k-1)/2 pad.
pub const PATCH_KERNELS: [usize; 4] = [7, 3, 3, 3];

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Channel plan from the reference architecture.
    pub fn paper() -> Self {
        EncoderConfig {
            channels: [64, 128, 320, 512],
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
        }
    }

    /// Desk-scale plan for fast CPU runs.
    pub fn toy() -> Self {
        EncoderConfig {
            channels: [8, 16, 24, 32],
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.channels[i] == 0 || self.depths[i] == 0 || self.heads[i] == 0 || self.sr_ratios[i] == 0 {
                return Err(Error::config(format!("encoder stage {i}: zero-sized field")));
            }
            if self.channels[i] % self.heads[i] != 0 {
                return Err(Error::Indivisible {
                    op: "encoder_config",
                    what: "channels",
                    value: self.channels[i],
                    divisor: self.heads[i],
                });
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("encoder: mlp_ratio must be >= 1"));
        }
        Ok(())
    }
}

/// The four encoder outputs; x_i lives on the H/2^(i+1) grid with
/// channels[i-1] channels.
pub struct FeaturePyramid {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub x4: Tensor,
}

impl FeaturePyramid {
    pub fn as_array(&self) -> [Tensor; 4] {
        [self.x1, self.x2, self.x3, self.x4]
    }
}

/// Key/value spatial reduction: strided conv + token norm.
pub struct SrReduce {
    pub w: ParamId,
    pub b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub ratio: usize,
}

/// Multi-head self-attention with optional key/value reduction.
pub struct AttentionParams {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub sr: Option<SrReduce>,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: usize,
        heads: usize,
        sr_ratio: usize,
    ) -> Result<Self> {
        if c % heads != 0 {
            return Err(Error::Indivisible {
                op: "attention",
                what: "channels",
                value: c,
                divisor: heads,
            });
        }
        let w = Init::TruncNormal { std: INIT_STD };
        let lin = Shape::new(1, 1, c, c);
        let vecb = Shape::new(1, 1, 1, c);
        let q_w = store.register(format!("{prefix}.q.w"), lin, w, rng)?;
        let q_b = store.register(format!("{prefix}.q.b"), vecb, Init::Zeros, rng)?;
        let k_w = store.register(format!("{prefix}.k.w"), lin, w, rng)?;
        let k_b = store.register(format!("{prefix}.k.b"), vecb, Init::Zeros, rng)?;
        let v_w = store.register(format!("{prefix}.v.w"), lin, w, rng)?;
        let v_b = store.register(format!("{prefix}.v.b"), vecb, Init::Zeros, rng)?;
        let proj_w = store.register(format!("{prefix}.proj.w"), lin, w, rng)?;
        let proj_b = store.register(format!("{prefix}.proj.b"), vecb, Init::Zeros, rng)?;
        let sr = if sr_ratio > 1 {
            Some(SrReduce {
                w: store.register(
                    format!("{prefix}.sr.w"),
                    Shape::new(c, c, sr_ratio, sr_ratio),
                    w,
                    rng,
                )?,
                b: store.register(format!("{prefix}.sr.b"), Shape::new(1, c, 1, 1), Init::Zeros, rng)?,
                ln_g: store.register(format!("{prefix}.sr.ln.g"), vecb, Init::Ones, rng)?,
                ln_b: store.register(format!("{prefix}.sr.ln.b"), vecb, Init::Zeros, rng)?,
                ratio: sr_ratio,
            })
        } else {
            None
        };
        Ok(AttentionParams {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            proj_w,
            proj_b,
            sr,
            heads,
        })
    }

    /// tokens (N,1,L,C) on an h x w grid -> same shape. Attention weights
    /// are a softmax over the (possibly reduced) key set, so each query row
    /// sums to 1.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        tokens: Tensor,
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        let c = tokens.shape().w;
        let d = c / self.heads;

        let q = g.linear(tokens, bind.get(self.q_w), Some(bind.get(self.q_b)))?;
        let q = g.split_heads(q, self.heads)?;

        let kv_src = match &self.sr {
            Some(sr) => {
                if h % sr.ratio != 0 || w % sr.ratio != 0 {
                    return Err(Error::Indivisible {
                        op: "sra",
                        what: "grid",
                        value: h * w,
                        divisor: sr.ratio * sr.ratio,
                    });
                }
                let spatial = g.from_tokens(tokens, h, w)?;
                let p = ConvParams::new(bind.get(sr.w), Some(bind.get(sr.b)), sr.ratio, 0, 1);
                let red = g.conv2d(spatial, &p)?;
                let red = g.to_tokens(red)?;
                g.layer_norm(red, bind.get(sr.ln_g), bind.get(sr.ln_b), LN_EPS)?
            }
            None => tokens,
        };
        let k = g.linear(kv_src, bind.get(self.k_w), Some(bind.get(self.k_b)))?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.linear(kv_src, bind.get(self.v_w), Some(bind.get(self.v_b)))?;
        let v = g.split_heads(v, self.heads)?;

        let scores = g.matmul_nt(q, k)?;
        let scaled = g.affine(scores, 1.0 / (d as f64).sqrt(), 0.0)?;
        let attn = g.softmax_last(scaled)?;
        let ctx = g.matmul(attn, v)?;
        let merged = g.merge_heads(ctx)?;
        g.linear(merged, bind.get(self.proj_w), Some(bind.get(self.proj_b)))
    }
}

/// Pre-norm transformer block: attention + conv-mixed MLP, both residual.
/// The 3x3 depthwise conv inside the MLP carries positional information,
/// so no fixed-size position table is needed and any 32-divisible input
/// resolution works.
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AttentionParams,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl BlockParams {
    fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: usize,
        heads: usize,
        sr_ratio: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let w = Init::TruncNormal { std: INIT_STD };
        let vecb = Shape::new(1, 1, 1, c);
        let hidden = c * mlp_ratio;
        Ok(BlockParams {
            ln1_g: store.register(format!("{prefix}.ln1.g"), vecb, Init::Ones, rng)?,
            ln1_b: store.register(format!("{prefix}.ln1.b"), vecb, Init::Zeros, rng)?,
            attn: AttentionParams::new(store, rng, prefix, c, heads, sr_ratio)?,
            ln2_g: store.register(format!("{prefix}.ln2.g"), vecb, Init::Ones, rng)?,
            ln2_b: store.register(format!("{prefix}.ln2.b"), vecb, Init::Zeros, rng)?,
            fc1_w: store.register(format!("{prefix}.fc1.w"), Shape::new(1, 1, hidden, c), w, rng)?,
            fc1_b: store.register(format!("{prefix}.fc1.b"), Shape::new(1, 1, 1, hidden), Init::Zeros, rng)?,
            dw_w: store.register(format!("{prefix}.dw.w"), Shape::new(hidden, 1, 3, 3), w, rng)?,
            dw_b: store.register(format!("{prefix}.dw.b"), Shape::new(1, hidden, 1, 1), Init::Zeros, rng)?,
            fc2_w: store.register(format!("{prefix}.fc2.w"), Shape::new(1, 1, c, hidden), w, rng)?,
            fc2_b: store.register(format!("{prefix}.fc2.b"), Shape::new(1, 1, 1, c), Init::Zeros, rng)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        tokens: Tensor,
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        let a = g.layer_norm(tokens, bind.get(self.ln1_g), bind.get(self.ln1_b), LN_EPS)?;
        let a = self.attn.forward(g, bind, a, h, w)?;
        let tokens = g.add(tokens, a)?;

        let m = g.layer_norm(tokens, bind.get(self.ln2_g), bind.get(self.ln2_b), LN_EPS)?;
        let m = g.linear(m, bind.get(self.fc1_w), Some(bind.get(self.fc1_b)))?;
        let spatial = g.from_tokens(m, h, w)?;
        let mixed = g.depthwise_conv(spatial, bind.get(self.dw_w), Some(bind.get(self.dw_b)))?;
        let m = g.to_tokens(mixed)?;
        let m = g.gelu(m)?;
        let m = g.linear(m, bind.get(self.fc2_w), Some(bind.get(self.fc2_b)))?;
        g.add(tokens, m)
    }
}

struct StageParams {
    patch_w: ParamId,
    patch_b: ParamId,
    patch_ln_g: ParamId,
    patch_ln_b: ParamId,
    blocks: Vec<BlockParams>,
    out_ln_g: ParamId,
    out_ln_b: ParamId,
}

pub struct Encoder {
    cfg: EncoderConfig,
    in_channels: usize,
    stages: Vec<StageParams>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        cfg: EncoderConfig,
        in_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = Init::TruncNormal { std: INIT_STD };
        let mut stages = Vec::with_capacity(4);
        let mut c_prev = in_channels;
        for i in 0..4 {
            let c = cfg.channels[i];
            let k = PATCH_KERNELS[i];
            let vecb = Shape::new(1, 1, 1, c);
            let prefix = format!("enc.s{i}");
            let mut blocks = Vec::with_capacity(cfg.depths[i]);
            let patch_w = store.register(format!("{prefix}.patch.w"), Shape::new(c, c_prev, k, k), w, rng)?;
            let patch_b = store.register(format!("{prefix}.patch.b"), Shape::new(1, c, 1, 1), Init::Zeros, rng)?;
            let patch_ln_g = store.register(format!("{prefix}.patch.ln.g"), vecb, Init::Ones, rng)?;
            let patch_ln_b = store.register(format!("{prefix}.patch.ln.b"), vecb, Init::Zeros, rng)?;
            for j in 0..cfg.depths[i] {
                blocks.push(BlockParams::new(
                    store,
                    rng,
                    &format!("{prefix}.b{j}"),
                    c,
                    cfg.heads[i],
                    cfg.sr_ratios[i],
                    cfg.mlp_ratio,
                )?);
            }
            let out_ln_g = store.register(format!("{prefix}.norm.g"), vecb, Init::Ones, rng)?;
            let out_ln_b = store.register(format!("{prefix}.norm.b"), vecb, Init::Zeros, rng)?;
            stages.push(StageParams {
                patch_w,
                patch_b,
                patch_ln_g,
                patch_ln_b,
                blocks,
                out_ln_g,
                out_ln_b,
            });
            c_prev = c;
        }
        Ok(Encoder {
            cfg,
            in_channels,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Strided overlapping patch embedding followed by per-token
    /// normalization; spatial size divides by the stage stride.
    fn patch_embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        stage: usize,
        x: Tensor,
    ) -> Result<Tensor> {
        let s = &self.stages[stage];
        let stride = PATCH_STRIDES[stage];
        let k = PATCH_KERNELS[stage];
        let xs = x.shape();
        if xs.h % stride != 0 {
            return Err(Error::Indivisible {
                op: "patch_embed",
                what: "height",
                value: xs.h,
                divisor: stride,
            });
        }
        if xs.w % stride != 0 {
            return Err(Error::Indivisible {
                op: "patch_embed",
                what: "width",
                value: xs.w,
                divisor: stride,
            });
        }
        let p = ConvParams::new(bind.get(s.patch_w), Some(bind.get(s.patch_b)), stride, (k - 1) / 2, 1);
        let emb = g.conv2d(x, &p)?;
        let tok = g.to_tokens(emb)?;
        g.layer_norm(tok, bind.get(s.patch_ln_g), bind.get(s.patch_ln_b), LN_EPS)
    }

    /// Full pyramid: input (N, C_in, H, W) with H, W divisible by 32.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        x: Tensor,
    ) -> Result<FeaturePyramid> {
        let xs = x.shape();
        if xs.c != self.in_channels {
            return Err(Error::DimMismatch {
                op: "encoder_forward",
                axis: "channels",
                expected: self.in_channels,
                got: xs.c,
            });
        }
        if xs.h % 32 != 0 {
            return Err(Error::Indivisible {
                op: "encoder_forward",
                what: "height",
                value: xs.h,
                divisor: 32,
            });
        }
        if xs.w % 32 != 0 {
            return Err(Error::Indivisible {
                op: "encoder_forward",
                what: "width",
                value: xs.w,
                divisor: 32,
            });
        }

        let mut outs = Vec::with_capacity(4);
        let mut cur = x;
        for i in 0..4 {
            let stage = &self.stages[i];
            let mut tok = self.patch_embed(g, bind, i, cur)?;
            let (h, w) = (cur.shape().h / PATCH_STRIDES[i], cur.shape().w / PATCH_STRIDES[i]);
            for block in &stage.blocks {
                tok = block.forward(g, bind, tok, h, w)?;
            }
            tok = g.layer_norm(tok, bind.get(stage.out_ln_g), bind.get(stage.out_ln_b), LN_EPS)?;
            cur = g.from_tokens(tok, h, w)?;
            outs.push(cur);
        }
        Ok(FeaturePyramid {
            x1: outs[0],
            x2: outs[1],
            x3: outs[2],
            x4: outs[3],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(cfg: EncoderConfig) -> (ParamStore<f64>, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, cfg, 3).unwrap();
        (store, enc)
    }

    fn forward_shapes(cfg: EncoderConfig, hw: usize) -> [Shape; 4] {
        let (store, enc) = build(cfg);
        let mut g: Graph<f64> = Graph::new();
        let bind = store.bind(&mut g).unwrap();
        let x = g
            .constant(vec![0.1; 3 * hw * hw], Shape::new(1, 3, hw, hw))
            .unwrap();
        let pyr = enc.forward(&mut g, &bind, x).unwrap();
        pyr.as_array().map(|t| t.shape())
    }

    #[test]
    fn toy_pyramid_shape_law_at_64() {
        let shapes = forward_shapes(EncoderConfig::toy(), 64);
        assert_eq!(shapes[0], Shape::new(1, 8, 16, 16));
        assert_eq!(shapes[1], Shape::new(1, 16, 8, 8));
        assert_eq!(shapes[2], Shape::new(1, 24, 4, 4));
        assert_eq!(shapes[3], Shape::new(1, 32, 2, 2));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (store, enc) = build(EncoderConfig::toy());
        let mut g: Graph<f64> = Graph::new();
        let bind = store.bind(&mut g).unwrap();
        let x = g
            .constant(vec![0.0; 3 * 48 * 48], Shape::new(1, 3, 48, 48))
            .unwrap();
        assert!(matches!(
            enc.forward(&mut g, &bind, x),
            Err(Error::Indivisible { divisor: 32, .. })
        ));
    }

    #[test]
    fn config_rejects_head_indivisible_channels() {
        let cfg = EncoderConfig {
            channels: [10, 16, 24, 32],
            heads: [4, 2, 4, 8],
            ..EncoderConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gradient_reaches_first_patch_embed() {
        let (store, enc) = build(EncoderConfig::toy());
        let mut g: Graph<f64> = Graph::new();
        let bind = store.bind(&mut g).unwrap();
        let x = g
            .constant(
                (0..3 * 64 * 64).map(|i| (i % 7) as f64 * 0.1).collect(),
                Shape::new(1, 3, 64, 64),
            )
            .unwrap();
        let pyr = enc.forward(&mut g, &bind, x).unwrap();
        let loss = g.sum_all(pyr.x4).unwrap();
        g.backward(loss).unwrap();
        let pw = store.lookup("enc.s0.patch.w").unwrap();
        let grad = g.grad(bind.get(pw)).unwrap();
        assert!(grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batch_permutation_equivariance() {
        let (store, enc) = build(EncoderConfig::toy());
        let a: Vec<f64> = (0..3 * 64 * 64).map(|i| ((i * 37) % 11) as f64 * 0.05).collect();
        let b: Vec<f64> = (0..3 * 64 * 64).map(|i| ((i * 53) % 13) as f64 * 0.04).collect();

        let run = |first: &[f64], second: &[f64]| {
            let mut g: Graph<f64> = Graph::new();
            let bind = store.bind(&mut g).unwrap();
            let mut data = first.to_vec();
            data.extend_from_slice(second);
            let x = g.constant(data, Shape::new(2, 3, 64, 64)).unwrap();
            let pyr = enc.forward(&mut g, &bind, x).unwrap();
            g.data(pyr.x4).to_vec()
        };

        let ab = run(&a, &b);
        let ba = run(&b, &a);
        let half = ab.len() / 2;
        assert_eq!(&ab[..half], &ba[half..]);
        assert_eq!(&ab[half..], &ba[..half]);
    }
}
