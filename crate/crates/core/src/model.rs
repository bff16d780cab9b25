//! Full network assembly: encoder pyramid, GLIM decoder stream into the
//! P1 head, SAM stream into the P2 head, and the structural ablation
//! variants as build-time configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::glim::{GlimOptions, GlimStack};
use crate::graph::{Graph, Tensor};
use crate::ops::ConvParams;
use crate::params::{Init, ParamBinding, ParamId, ParamStore};
use crate::sam::SamBlock;
use crate::scalar::Scalar;
use crate::shape::Shape;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Channel width of the fused GLIM decoder stream.
    pub decoder_width: usize,
    /// Common projection width inside SAM.
    pub sam_width: usize,
    /// Nominal square input resolution; must divide by 32.
    pub input_hw: usize,
    pub use_glim: bool,
    pub use_sam: bool,
    pub glim_conv_branches: bool,
    pub glim_gap_branch: bool,
    pub separable_branches: bool,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            encoder: EncoderConfig::paper(),
            decoder_width: 64,
            sam_width: 32,
            input_hw: 352,
            use_glim: true,
            use_sam: true,
            glim_conv_branches: true,
            glim_gap_branch: true,
            separable_branches: false,
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            decoder_width: 16,
            sam_width: 8,
            input_hw: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.input_hw % 32 != 0 {
            return Err(Error::Indivisible {
                op: "model_config",
                what: "input_hw",
                value: self.input_hw,
                divisor: 32,
            });
        }
        if self.decoder_width == 0 || self.sam_width == 0 {
            return Err(Error::config("model: zero decoder/sam width"));
        }
        if self.use_glim {
            for c in &self.encoder.channels[1..] {
                if c % 4 != 0 {
                    return Err(Error::Indivisible {
                        op: "model_config",
                        what: "glim channels",
                        value: *c,
                        divisor: 4,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn variant(&self, v: AblationVariant) -> Self {
        let mut cfg = self.clone();
        cfg.use_glim = true;
        cfg.use_sam = true;
        cfg.glim_conv_branches = true;
        cfg.glim_gap_branch = true;
        match v {
            AblationVariant::Full => {}
            AblationVariant::WithoutGlim => cfg.use_glim = false,
            AblationVariant::WithoutSam => cfg.use_sam = false,
            AblationVariant::WithoutConv => cfg.glim_conv_branches = false,
            AblationVariant::WithoutGap => cfg.glim_gap_branch = false,
        }
        cfg
    }
}

/// The structural rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    WithoutGlim,
    WithoutSam,
    WithoutConv,
    WithoutGap,
}

impl AblationVariant {
    pub fn all() -> [AblationVariant; 5] {
        [
            AblationVariant::Full,
            AblationVariant::WithoutGlim,
            AblationVariant::WithoutSam,
            AblationVariant::WithoutConv,
            AblationVariant::WithoutGap,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutGlim => "wo_glim",
            AblationVariant::WithoutSam => "wo_sam",
            AblationVariant::WithoutConv => "wo_conv",
            AblationVariant::WithoutGap => "wo_gap",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(AblationVariant::Full),
            "wo_glim" | "wo-glim" | "no-glim" => Some(AblationVariant::WithoutGlim),
            "wo_sam" | "wo-sam" | "no-sam" => Some(AblationVariant::WithoutSam),
            "wo_conv" | "wo-conv" | "no-conv" => Some(AblationVariant::WithoutConv),
            "wo_gap" | "wo-gap" | "no-gap" => Some(AblationVariant::WithoutGap),
            _ => None,
        }
    }
}

struct Head {
    w: ParamId,
    b: ParamId,
}

impl Head {
    fn new(store: &mut ParamStore<impl Scalar>, rng: &mut ChaCha8Rng, name: &str, c_in: usize) -> Result<Self> {
        Ok(Head {
            w: store.register(format!("{name}.w"), Shape::new(1, c_in, 1, 1), Init::TruncNormal { std: INIT_STD }, rng)?,
            b: store.register(format!("{name}.b"), Shape::new(1, 1, 1, 1), Init::Zeros, rng)?,
        })
    }

    /// 1x1 conv to a single logit channel, then bilinear upsample to the
    /// full input resolution.
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        x: Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        let p = ConvParams::new(bind.get(self.w), Some(bind.get(self.b)), 1, 0, 1);
        let logit = g.conv2d(x, &p)?;
        g.bilinear_resize(logit, out_h, out_w)
    }
}

/// Both full-resolution logit tensors of one forward pass plus the
/// parameter binding used to produce them.
pub struct ForwardPass {
    pub p1: Tensor,
    pub p2: Tensor,
    pub binding: ParamBinding,
}

/// Materialized inference output: logits and 0/1 masks at threshold 0.5
/// on the sigmoid probability (equivalently logit > 0).
pub struct Predictions<T> {
    pub shape: Shape,
    pub p1: Vec<T>,
    pub p2: Vec<T>,
    pub mask1: Vec<u8>,
    pub mask2: Vec<u8>,
}

pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    pub store: ParamStore<T>,
    encoder: Encoder,
    glim: Option<GlimStack>,
    sam: SamBlock,
    p1_head: Head,
    p2_head: Head,
}

impl<T: Scalar> Model<T> {
    /// Deterministic build: the same config and seed always produce the
    /// same parameter tensors in the same registration order.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = cfg.encoder.channels;
        let encoder = Encoder::new(&mut store, &mut rng, cfg.encoder.clone(), 3)?;
        let glim = if cfg.use_glim {
            Some(GlimStack::new(
                &mut store,
                &mut rng,
                [ch[1], ch[2], ch[3]],
                cfg.decoder_width,
                GlimOptions {
                    conv_branches: cfg.glim_conv_branches,
                    gap_branch: cfg.glim_gap_branch,
                    separable_branches: cfg.separable_branches,
                },
            )?)
        } else {
            None
        };
        let sam = SamBlock::new(&mut store, &mut rng, ch[0], ch[3], cfg.sam_width, cfg.use_sam)?;
        let p1_in = if cfg.use_glim { cfg.decoder_width } else { ch[3] };
        let p1_head = Head::new(&mut store, &mut rng, "head.p1", p1_in)?;
        let p2_head = Head::new(&mut store, &mut rng, "head.p2", cfg.sam_width)?;
        Ok(Model {
            cfg,
            store,
            encoder,
            glim,
            sam,
            p1_head,
            p2_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Deterministic count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Forward pass on an already-recorded input tensor. The input must be
    /// (N, 3, H, W) with H, W divisible by 32; H need not equal the nominal
    /// `input_hw` so multi-scale training can feed rescaled batches.
    pub fn forward(&self, g: &mut Graph<T>, x: Tensor) -> Result<ForwardPass> {
        let binding = self.store.bind(g)?;
        let (p1, p2) = self.forward_with(g, &binding, x)?;
        Ok(ForwardPass { p1, p2, binding })
    }

    /// Forward using an existing binding (one binding per graph).
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        x: Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let xs = x.shape();
        let pyr: FeaturePyramid = self.encoder.forward(g, bind, x)?;

        let p1 = match &self.glim {
            Some(stack) => {
                let fused = stack.forward(g, bind, &pyr)?;
                self.p1_head.forward(g, bind, fused, xs.h, xs.w)?
            }
            None => {
                // ablation "w/o GLIM": the head reads upsampled X4 directly
                let t = pyr.x2.shape();
                let up = g.bilinear_resize(pyr.x4, t.h, t.w)?;
                self.p1_head.forward(g, bind, up, xs.h, xs.w)?
            }
        };

        let (h1, h4) = self.sam.align(g, bind, pyr.x1, pyr.x4)?;
        let fused = self.sam.forward(g, bind, h1, h4)?;
        let p2 = self.p2_head.forward(g, bind, fused, xs.h, xs.w)?;

        Ok((p1, p2))
    }

    /// Run inference on raw image data and binarize both heads.
    pub fn predict(&self, image: &[T], shape: Shape) -> Result<Predictions<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.to_vec(), shape)?;
        let pass = self.forward(&mut g, x)?;
        let p1 = g.data(pass.p1).to_vec();
        let p2 = g.data(pass.p2).to_vec();
        let mask = |v: &[T]| v.iter().map(|&z| u8::from(z > T::ZERO)).collect();
        Ok(Predictions {
            shape: pass.p1.shape(),
            mask1: mask(&p1),
            mask2: mask(&p2),
            p1,
            p2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_heads_produce_full_resolution_logits() {
        let model: Model<f32> = Model::build(ModelConfig::toy(), 3).unwrap();
        let mut g = Graph::new();
        let x = g
            .constant(vec![0.5; 2 * 3 * 64 * 64], Shape::new(2, 3, 64, 64))
            .unwrap();
        let pass = model.forward(&mut g, x).unwrap();
        assert_eq!(pass.p1.shape(), Shape::new(2, 1, 64, 64));
        assert_eq!(pass.p2.shape(), Shape::new(2, 1, 64, 64));
    }

    #[test]
    fn parameter_count_is_reproducible_and_variant_ordered() {
        let toy = ModelConfig::toy();
        let full_a: Model<f32> = Model::build(toy.clone(), 1).unwrap();
        let full_b: Model<f32> = Model::build(toy.clone(), 2).unwrap();
        assert_eq!(full_a.parameter_count(), full_b.parameter_count());

        let wo_glim: Model<f32> = Model::build(toy.variant(AblationVariant::WithoutGlim), 1).unwrap();
        assert!(full_a.parameter_count() > wo_glim.parameter_count());
        let wo_sam: Model<f32> = Model::build(toy.variant(AblationVariant::WithoutSam), 1).unwrap();
        assert!(full_a.parameter_count() > wo_sam.parameter_count());
    }

    #[test]
    fn masks_threshold_logits_at_zero() {
        let model: Model<f32> = Model::build(ModelConfig::toy(), 3).unwrap();
        let image = vec![0.5; 3 * 64 * 64];
        let preds = model.predict(&image, Shape::new(1, 3, 64, 64)).unwrap();
        for (z, m) in preds.p1.iter().zip(&preds.mask1) {
            assert_eq!(*m, u8::from(*z > 0.0));
        }
        // idempotent across calls
        let again = model.predict(&image, Shape::new(1, 3, 64, 64)).unwrap();
        assert_eq!(preds.mask1, again.mask1);
        assert_eq!(preds.mask2, again.mask2);
    }

    #[test]
    fn invalid_input_hw_rejected_at_build() {
        let mut cfg = ModelConfig::toy();
        cfg.input_hw = 50;
        assert!(Model::<f32>::build(cfg, 0).is_err());
    }

    #[test]
    fn every_parameter_receives_gradient_from_both_heads() {
        for variant in AblationVariant::all() {
            let cfg = ModelConfig::toy().variant(variant);
            let model: Model<f64> = Model::build(cfg, 9).unwrap();
            let mut g = Graph::new();
            let x = g
                .constant(
                    (0..3 * 64 * 64).map(|i| ((i * 13) % 29) as f64 / 29.0).collect(),
                    Shape::new(1, 3, 64, 64),
                )
                .unwrap();
            let pass = model.forward(&mut g, x).unwrap();
            let s1 = g.sum_all(pass.p1).unwrap();
            let s2 = g.sum_all(pass.p2).unwrap();
            let sq1 = g.mul(s1, s1).unwrap();
            let sq2 = g.mul(s2, s2).unwrap();
            let loss = g.add(sq1, sq2).unwrap();
            g.backward(loss).unwrap();
            for (i, name) in model.store.names().enumerate() {
                let t = pass.binding.get(crate::params::ParamId(i));
                assert!(
                    g.grad(t).is_some(),
                    "{}: no gradient under variant {:?}",
                    name,
                    variant
                );
            }
        }
    }
}
