//! Global-local interaction block: split channels into four groups, run
//! a 1x1 conv, 3x3 and 5x5 depthwise convs, and a GAP-sigmoid gate over
//! them, fuse with a 1x1 conv, and modulate the block input with a GELU
//! gate on the fused feature.

use rand_chacha::ChaCha8Rng;

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::ops::ConvParams;
use crate::params::{Init, ParamBinding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::shape::Shape;

const INIT_STD: f64 = 0.02;

/// Structural switches for ablation variants.
#[derive(Clone, Copy, Debug)]
pub struct GlimOptions {
    /// false replaces branches 1-3 with identity on their channel groups.
    pub conv_branches: bool,
    /// false replaces the GAP gate branch with a 7x7 depthwise conv.
    pub gap_branch: bool,
    /// Adds a pointwise 1x1 stage after each depthwise branch. Off by
    /// default: the post-concat 1x1 fuse already supplies channel mixing.
    pub separable_branches: bool,
}

impl Default for GlimOptions {
    fn default() -> Self {
        GlimOptions {
            conv_branches: true,
            gap_branch: true,
            separable_branches: false,
        }
    }
}

pub struct ConvBranches {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub dw3_w: ParamId,
    pub dw3_b: ParamId,
    pub dw5_w: ParamId,
    pub dw5_b: ParamId,
    pub pw3: Option<(ParamId, ParamId)>,
    pub pw5: Option<(ParamId, ParamId)>,
}

pub enum GateBranch {
    /// sigmoid(GAP(x4)) * x4
    Gap,
    /// 7x7 depthwise conv standing in for the pooled gate.
    Dw7 { w: ParamId, b: ParamId },
}

pub struct GlimBlock {
    pub channels: usize,
    pub conv: Option<ConvBranches>,
    pub gate: GateBranch,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

impl GlimBlock {
    /// Channel count must divide into the four groups; rejected here at
    /// build time so forward never sees a ragged split.
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        opts: GlimOptions,
    ) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::config(format!(
                "{prefix}: {channels} channels not divisible into 4 groups"
            )));
        }
        let group = channels / 4;
        let w = Init::TruncNormal { std: INIT_STD };
        let conv = if opts.conv_branches {
            let pw = |store: &mut ParamStore<_>, rng: &mut _, tag: &str| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.register(format!("{prefix}.{tag}.w"), Shape::new(group, group, 1, 1), w, rng)?,
                    store.register(format!("{prefix}.{tag}.b"), Shape::new(1, group, 1, 1), Init::Zeros, rng)?,
                ))
            };
            let conv1 = pw(store, rng, "conv1")?;
            let dw3_w = store.register(format!("{prefix}.dw3.w"), Shape::new(group, 1, 3, 3), w, rng)?;
            let dw3_b = store.register(format!("{prefix}.dw3.b"), Shape::new(1, group, 1, 1), Init::Zeros, rng)?;
            let dw5_w = store.register(format!("{prefix}.dw5.w"), Shape::new(group, 1, 5, 5), w, rng)?;
            let dw5_b = store.register(format!("{prefix}.dw5.b"), Shape::new(1, group, 1, 1), Init::Zeros, rng)?;
            let (pw3, pw5) = if opts.separable_branches {
                (Some(pw(store, rng, "pw3")?), Some(pw(store, rng, "pw5")?))
            } else {
                (None, None)
            };
            Some(ConvBranches {
                conv1_w: conv1.0,
                conv1_b: conv1.1,
                dw3_w,
                dw3_b,
                dw5_w,
                dw5_b,
                pw3,
                pw5,
            })
        } else {
            None
        };
        let gate = if opts.gap_branch {
            GateBranch::Gap
        } else {
            GateBranch::Dw7 {
                w: store.register(format!("{prefix}.dw7.w"), Shape::new(group, 1, 7, 7), w, rng)?,
                b: store.register(format!("{prefix}.dw7.b"), Shape::new(1, group, 1, 1), Init::Zeros, rng)?,
            }
        };
        Ok(GlimBlock {
            channels,
            conv,
            gate,
            fuse_w: store.register(format!("{prefix}.fuse.w"), Shape::new(channels, channels, 1, 1), w, rng)?,
            fuse_b: store.register(format!("{prefix}.fuse.b"), Shape::new(1, channels, 1, 1), Init::Zeros, rng)?,
        })
    }

    /// The fused pre-gate feature: per-group branches, channel concat,
    /// 1x1 fuse. Exposed separately so the group-isolation property can be
    /// probed with an identity fuse.
    pub fn features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        x: Tensor,
    ) -> Result<Tensor> {
        if x.shape().c != self.channels {
            return Err(Error::DimMismatch {
                op: "glim",
                axis: "channels",
                expected: self.channels,
                got: x.shape().c,
            });
        }
        let groups = g.split_channels(x, 4)?;

        let (b1, b2, b3) = match &self.conv {
            Some(cb) => {
                let p1 = ConvParams::new(bind.get(cb.conv1_w), Some(bind.get(cb.conv1_b)), 1, 0, 1);
                let b1 = g.conv2d(groups[0], &p1)?;
                let mut b2 = g.depthwise_conv(groups[1], bind.get(cb.dw3_w), Some(bind.get(cb.dw3_b)))?;
                if let Some((pw, pb)) = cb.pw3 {
                    let p = ConvParams::new(bind.get(pw), Some(bind.get(pb)), 1, 0, 1);
                    b2 = g.conv2d(b2, &p)?;
                }
                let mut b3 = g.depthwise_conv(groups[2], bind.get(cb.dw5_w), Some(bind.get(cb.dw5_b)))?;
                if let Some((pw, pb)) = cb.pw5 {
                    let p = ConvParams::new(bind.get(pw), Some(bind.get(pb)), 1, 0, 1);
                    b3 = g.conv2d(b3, &p)?;
                }
                (b1, b2, b3)
            }
            None => (groups[0], groups[1], groups[2]),
        };

        let b4 = match &self.gate {
            GateBranch::Gap => {
                let pooled = g.gap2d(groups[3])?;
                let gate = g.sigmoid(pooled)?;
                g.mul(groups[3], gate)?
            }
            GateBranch::Dw7 { w, b } => g.depthwise_conv(groups[3], bind.get(*w), Some(bind.get(*b)))?,
        };

        let cat = g.concat_channels(&[b1, b2, b3, b4])?;
        let fuse = ConvParams::new(bind.get(self.fuse_w), Some(bind.get(self.fuse_b)), 1, 0, 1);
        g.conv2d(cat, &fuse)
    }

    /// GELU(features) applied as an elementwise gate on the input;
    /// shape-preserving.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        x: Tensor,
    ) -> Result<Tensor> {
        let f = self.features(g, bind, x)?;
        let gate = g.gelu(f)?;
        g.mul(gate, x)
    }
}

/// GLIM over the three high-level pyramid levels, upsampled to the x2 grid,
/// concatenated and fused down to the decoder width.
pub struct GlimStack {
    pub blocks: [GlimBlock; 3],
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub width: usize,
}

impl GlimStack {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        channels: [usize; 3],
        width: usize,
        opts: GlimOptions,
    ) -> Result<Self> {
        let blocks = [
            GlimBlock::new(store, rng, "glim.l2", channels[0], opts)?,
            GlimBlock::new(store, rng, "glim.l3", channels[1], opts)?,
            GlimBlock::new(store, rng, "glim.l4", channels[2], opts)?,
        ];
        let total: usize = channels.iter().sum();
        Ok(GlimStack {
            blocks,
            fuse_w: store.register(
                "glim.fuse.w",
                Shape::new(width, total, 1, 1),
                Init::TruncNormal { std: INIT_STD },
                rng,
            )?,
            fuse_b: store.register("glim.fuse.b", Shape::new(1, width, 1, 1), Init::Zeros, rng)?,
            width,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &ParamBinding,
        pyr: &FeaturePyramid,
    ) -> Result<Tensor> {
        let target = pyr.x2.shape();
        let y2 = self.blocks[0].forward(g, bind, pyr.x2)?;
        let y3 = self.blocks[1].forward(g, bind, pyr.x3)?;
        let y4 = self.blocks[2].forward(g, bind, pyr.x4)?;
        let y3 = g.bilinear_resize(y3, target.h, target.w)?;
        let y4 = g.bilinear_resize(y4, target.h, target.w)?;
        let cat = g.concat_channels(&[y2, y3, y4])?;
        let fuse = ConvParams::new(bind.get(self.fuse_w), Some(bind.get(self.fuse_b)), 1, 0, 1);
        g.conv2d(cat, &fuse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::sigmoid;
    use rand::SeedableRng;

    fn block(channels: usize, opts: GlimOptions) -> (ParamStore<f64>, GlimBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let b = GlimBlock::new(&mut store, &mut rng, "glim.t", channels, opts).unwrap();
        (store, b)
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let (store, blk) = block(64, GlimOptions::default());
        let mut g: Graph<f64> = Graph::new();
        let bind = store.bind(&mut g).unwrap();
        let x = g
            .constant(
                (0..64 * 22 * 22).map(|i| (i as f64 * 0.37).sin() * 0.2).collect(),
                Shape::new(1, 64, 22, 22),
            )
            .unwrap();
        let y = blk.forward(&mut g, &bind, x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 64, 22, 22));
    }

    #[test]
    fn indivisible_channels_rejected_at_build_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        assert!(GlimBlock::new(&mut store, &mut rng, "glim.t", 6, GlimOptions::default()).is_err());
    }

    #[test]
    fn gap_gate_branch_closed_form_on_constant_input() {
        // constant map c: gate = sigmoid(c), branch output = c * sigmoid(c)
        let c = 0.8;
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![c; 3 * 3], Shape::new(1, 1, 3, 3)).unwrap();
        let pooled = g.gap2d(x).unwrap();
        let gate = g.sigmoid(pooled).unwrap();
        let y = g.mul(x, gate).unwrap();
        for &v in g.data(y) {
            assert!((v - c * sigmoid(c)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_annihilate_output() {
        // all conv weights and biases zero: fused feature is 0, GELU(0)=0,
        // output 0 regardless of input
        let (mut store, blk) = block(8, GlimOptions::default());
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for n in names {
            let id = store.lookup(&n).unwrap();
            store.data_mut(id).fill(0.0);
        }
        let mut g: Graph<f64> = Graph::new();
        let bind = store.bind(&mut g).unwrap();
        let x = g
            .constant((0..8 * 4 * 4).map(|i| i as f64 * 0.1 - 3.0).collect(), Shape::new(1, 8, 4, 4))
            .unwrap();
        let y = blk.forward(&mut g, &bind, x).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn groups_stay_isolated_before_fuse() {
        // with identity fuse and zero biases, zeroing input group j zeroes
        // branch j's slice of the fused feature and leaves others unchanged
        let channels = 8;
        let (mut store, blk) = block(channels, GlimOptions::default());
        // zero all biases, identity fuse
        let bias_names: Vec<String> = store
            .names()
            .filter(|n| n.ends_with(".b"))
            .map(|s| s.to_string())
            .collect();
        for n in bias_names {
            let id = store.lookup(&n).unwrap();
            store.data_mut(id).fill(0.0);
        }
        let fuse = store.lookup("glim.t.fuse.w").unwrap();
        {
            let data = store.data_mut(fuse);
            data.fill(0.0);
            for i in 0..channels {
                data[i * channels + i] = 1.0;
            }
        }

        let base: Vec<f64> = (0..channels * 9).map(|i| ((i * 31) % 17) as f64 * 0.1 - 0.8).collect();
        let run = |store: &ParamStore<f64>, data: Vec<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let bind = store.bind(&mut g).unwrap();
            let x = g.constant(data, Shape::new(1, channels, 3, 3)).unwrap();
            let f = blk.features(&mut g, &bind, x).unwrap();
            g.data(f).to_vec()
        };
        let full = run(&store, base.clone());
        let group = channels / 4;
        for j in 0..4 {
            let mut zeroed = base.clone();
            zeroed[j * group * 9..(j + 1) * group * 9].fill(0.0);
            let out = run(&store, zeroed);
            for cg in 0..4 {
                let slice = |v: &Vec<f64>| v[cg * group * 9..(cg + 1) * group * 9].to_vec();
                if cg == j {
                    assert!(slice(&out).iter().all(|&v| v == 0.0), "group {j} not zeroed");
                } else {
                    assert_eq!(slice(&out), slice(&full), "group {cg} perturbed by zeroing {j}");
                }
            }
        }
    }

    #[test]
    fn gap_gate_lies_strictly_inside_unit_interval() {
        let (store, blk) = block(8, GlimOptions::default());
        let mut g: Graph<f64> = Graph::new();
        let bind = store.bind(&mut g).unwrap();
        let x = g
            .constant(
                (0..8 * 16).map(|i| ((i * 7) % 23) as f64 * 0.4 - 4.0).collect(),
                Shape::new(1, 8, 4, 4),
            )
            .unwrap();
        let groups = g.split_channels(x, 4).unwrap();
        let pooled = g.gap2d(groups[3]).unwrap();
        let gate = g.sigmoid(pooled).unwrap();
        assert!(g.data(gate).iter().all(|&v| v > 0.0 && v < 1.0));
        drop(blk);
    }

    #[test]
    fn stack_fuses_three_levels_to_decoder_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store: ParamStore<f64> = ParamStore::new();
        let stack = GlimStack::new(&mut store, &mut rng, [16, 24, 32], 16, GlimOptions::default()).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let bind = store.bind(&mut g).unwrap();
        let x1 = g.constant(vec![0.1; 8 * 16 * 16], Shape::new(1, 8, 16, 16)).unwrap();
        let x2 = g.constant(vec![0.1; 16 * 8 * 8], Shape::new(1, 16, 8, 8)).unwrap();
        let x3 = g.constant(vec![0.1; 24 * 4 * 4], Shape::new(1, 24, 4, 4)).unwrap();
        let x4 = g.constant(vec![0.1; 32 * 2 * 2], Shape::new(1, 32, 2, 2)).unwrap();
        let pyr = FeaturePyramid { x1, x2, x3, x4 };
        let y = stack.forward(&mut g, &bind, &pyr).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 16, 8, 8));
    }
}
