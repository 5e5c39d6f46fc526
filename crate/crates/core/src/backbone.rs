//! Five-level U-Net encoders and decoders.
//!
//! Encoder block `l` runs two (conv 3³, instance norm, LeakyReLU) units;
//! blocks 2..5 open with a stride-2 convolution. Decoder block 5 works at
//! the bottleneck resolution; blocks 4..1 upsample ×2 trilinearly,
//! concatenate the level's skip features and run the same two units. Each
//! decoder block owns a 1×1×1 four-class softmax head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{Conv3d, ConvNormAct};
use crate::params::ParamStore;

pub const NUM_LEVELS: usize = 5;

/// Spatial extents must be divisible by this for the 5-level ladder.
pub const SPATIAL_MULTIPLE: usize = 1 << (NUM_LEVELS - 1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub negative_slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_channels: 4,
            negative_slope: 0.01,
        }
    }
}

impl BackboneConfig {
    /// Channel width at 1-based `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }
}

pub fn check_spatial(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&n| n == 0 || n % SPATIAL_MULTIPLE != 0) {
        return Err(Error::shape(format!(
            "spatial dims {dims:?} must be positive multiples of {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Two conv, instance-norm, LeakyReLU units; the first may downsample.
#[derive(Clone, Debug)]
pub struct Block {
    pub first: ConvNormAct,
    pub second: ConvNormAct,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        slope: f64,
    ) -> Self {
        Block {
            first: ConvNormAct::new(store, rng, &format!("{path}.unit1"), cin, cout, stride, slope),
            second: ConvNormAct::new(store, rng, &format!("{path}.unit2"), cout, cout, 1, slope),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.first.forward(g, store, x);
        self.second.forward(g, store, y)
    }
}

/// Per-level encoder features, index `l - 1` for level `l`.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub levels: Vec<Var>,
}

impl EncoderOutputs {
    pub fn level(&self, l: usize) -> Var {
        self.levels[l - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<Block>,
    pub in_channels: usize,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        in_channels: usize,
        cfg: &BackboneConfig,
    ) -> Self {
        let blocks = (1..=NUM_LEVELS)
            .map(|l| {
                let cin = if l == 1 { in_channels } else { cfg.channels(l - 1) };
                let stride = if l == 1 { 1 } else { 2 };
                Block::new(
                    store,
                    rng,
                    &format!("{path}.block{l}"),
                    cin,
                    cfg.channels(l),
                    stride,
                    cfg.negative_slope,
                )
            })
            .collect();
        Encoder {
            blocks,
            in_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<EncoderOutputs> {
        let t = g.value(x);
        if t.shape().len() != 4 || t.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "encoder expects {} input channels, got shape {:?}",
                self.in_channels,
                t.shape()
            )));
        }
        check_spatial(t.spatial())?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        let mut cur = x;
        for b in &self.blocks {
            cur = b.forward(g, store, cur);
            levels.push(cur);
        }
        Ok(EncoderOutputs { levels })
    }
}

/// Input widths a decoder is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderInputs {
    pub bottleneck: usize,
    /// Skip widths for levels 1..4.
    pub skips: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct DecoderOutputs {
    /// Full-resolution four-class probabilities (head of block 1).
    pub output: Var,
    /// Per-block probabilities, index `b - 1` for block `b`; empty without
    /// deep supervision.
    pub blocks: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Index `l - 1` for block `l`.
    blocks: Vec<Block>,
    heads: Vec<Conv3d>,
    pub inputs: DecoderInputs,
    channels: Vec<usize>,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        inputs: DecoderInputs,
        cfg: &BackboneConfig,
    ) -> Self {
        let channels: Vec<usize> = (1..=NUM_LEVELS).map(|l| cfg.channels(l)).collect();
        // Registration order follows data flow: block 5 first.
        let mut blocks: Vec<Option<Block>> = vec![None; NUM_LEVELS];
        let mut heads: Vec<Option<Conv3d>> = vec![None; NUM_LEVELS];
        for l in (1..=NUM_LEVELS).rev() {
            let cin = if l == NUM_LEVELS {
                inputs.bottleneck
            } else {
                channels[l] + inputs.skips[l - 1]
            };
            blocks[l - 1] = Some(Block::new(
                store,
                rng,
                &format!("{path}.block{l}"),
                cin,
                channels[l - 1],
                1,
                cfg.negative_slope,
            ));
            heads[l - 1] = Some(Conv3d::new(
                store,
                rng,
                &format!("{path}.head{l}"),
                channels[l - 1],
                NUM_CLASSES,
                1,
                1,
                1.0,
            ));
        }
        Decoder {
            blocks: blocks.into_iter().map(Option::unwrap).collect(),
            heads: heads.into_iter().map(Option::unwrap).collect(),
            inputs,
            channels,
        }
    }

    fn head(&self, g: &mut Graph, store: &ParamStore, level: usize, feat: Var) -> Var {
        let logits = self.heads[level - 1].forward(g, store, feat);
        g.softmax(logits, 0)
    }

    /// `skips[l - 1]` feeds block `l`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bottleneck: Var,
        skips: &[Var],
        supervision: bool,
    ) -> Result<DecoderOutputs> {
        if skips.len() != NUM_LEVELS - 1 {
            return Err(Error::Arity {
                expected: NUM_LEVELS - 1,
                got: skips.len(),
            });
        }
        let b = g.value(bottleneck);
        if b.channels() != self.inputs.bottleneck {
            return Err(Error::shape(format!(
                "decoder bottleneck expects {} channels, got {}",
                self.inputs.bottleneck,
                b.channels()
            )));
        }
        let mut dims = b.spatial();
        for l in (1..NUM_LEVELS).rev() {
            dims = dims.map(|n| n * 2);
            let s = g.value(skips[l - 1]);
            if s.channels() != self.inputs.skips[l - 1] || s.spatial() != dims {
                return Err(Error::shape(format!(
                    "skip {l}: expected {} x {:?}, got {:?}",
                    self.inputs.skips[l - 1],
                    dims,
                    s.shape()
                )));
            }
        }

        let mut block_probs = vec![None; NUM_LEVELS];
        let mut cur = self.blocks[NUM_LEVELS - 1].forward(g, store, bottleneck);
        if supervision {
            block_probs[NUM_LEVELS - 1] = Some(self.head(g, store, NUM_LEVELS, cur));
        }
        for l in (1..NUM_LEVELS).rev() {
            let target = g.value(skips[l - 1]).spatial();
            let up = g.resize(cur, target);
            let joined = g.concat(&[up, skips[l - 1]], 0);
            cur = self.blocks[l - 1].forward(g, store, joined);
            debug_assert_eq!(g.value(cur).channels(), self.channels[l - 1]);
            if supervision || l == 1 {
                block_probs[l - 1] = Some(self.head(g, store, l, cur));
            }
        }
        let output = block_probs[0].expect("block 1 head");
        Ok(DecoderOutputs {
            output,
            blocks: if supervision {
                block_probs.into_iter().map(Option::unwrap).collect()
            } else {
                Vec::new()
            },
        })
    }
}

/// Total scalar parameter count.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.count()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn encoder_ladder_shapes() {
        let cfg = BackboneConfig::default();
        for cin in [1, 4] {
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, &mut rng(), "e", cin, &cfg);
            let mut g = Graph::eval();
            let x = g.constant(Tensor::from_fn(&[cin, 32, 32, 32], |i| ((i * 7) % 13) as f64 * 0.1));
            let out = enc.forward(&mut g, &store, x).unwrap();
            let shapes: Vec<Vec<usize>> = out.levels.iter().map(|v| g.shape(*v).to_vec()).collect();
            assert_eq!(
                shapes,
                vec![
                    vec![4, 32, 32, 32],
                    vec![8, 16, 16, 16],
                    vec![16, 8, 8, 8],
                    vec![32, 4, 4, 4],
                    vec![64, 2, 2, 2]
                ]
            );
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng(), "e", 1, &cfg);
        let mut g = Graph::eval();
        let x = g.constant(Tensor::zeros(&[1, 16, 16, 16]));
        let out = enc.forward(&mut g, &store, x).unwrap();
        for v in out.levels {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng(), "e", 1, &BackboneConfig::default());
        let mut g = Graph::eval();
        let x = g.constant(Tensor::zeros(&[1, 24, 32, 32]));
        assert!(matches!(enc.forward(&mut g, &store, x), Err(Error::ShapeMismatch(_))));
    }

    fn decoder_fixture(supervision: bool) -> (Graph, DecoderOutputs) {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng(), "e", 1, &cfg);
        let dec = Decoder::new(
            &mut store,
            &mut rng(),
            "d",
            DecoderInputs {
                bottleneck: 64,
                skips: [4, 8, 16, 32],
            },
            &cfg,
        );
        let mut g = Graph::eval();
        let x = g.constant(Tensor::from_fn(&[1, 32, 32, 32], |i| (i as f64 * 0.37).sin()));
        let e = enc.forward(&mut g, &store, x).unwrap();
        let out = dec
            .forward(&mut g, &store, e.level(5), &e.levels[..4], supervision)
            .unwrap();
        (g, out)
    }

    #[test]
    fn decoder_output_is_distribution_and_supervision_ladder() {
        let (g, out) = decoder_fixture(true);
        let y = g.value(out.output);
        assert_eq!(y.shape(), &[4, 32, 32, 32]);
        let n = y.voxels();
        for v in 0..n {
            let s: f64 = (0..4).map(|k| y.data()[k * n + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let res: Vec<usize> = out.blocks.iter().map(|b| g.value(*b).spatial()[0]).collect();
        assert_eq!(res, vec![32, 16, 8, 4, 2]);
        assert_eq!(out.blocks[0], out.output);
    }

    #[test]
    fn decoder_is_pure() {
        let (g1, o1) = decoder_fixture(false);
        let (g2, o2) = decoder_fixture(false);
        assert_eq!(g1.value(o1.output), g2.value(o2.output));
        assert!(o1.blocks.is_empty());
    }

    #[test]
    fn skip_mismatch_rejected() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new();
        let dec = Decoder::new(
            &mut store,
            &mut rng(),
            "d",
            DecoderInputs {
                bottleneck: 64,
                skips: [4, 8, 16, 32],
            },
            &cfg,
        );
        let mut g = Graph::eval();
        let b = g.constant(Tensor::zeros(&[64, 2, 2, 2]));
        let skips = [
            g.constant(Tensor::zeros(&[4, 32, 32, 32])),
            g.constant(Tensor::zeros(&[8, 16, 16, 16])),
            g.constant(Tensor::zeros(&[16, 8, 8, 8])),
            g.constant(Tensor::zeros(&[31, 4, 4, 4])),
        ];
        assert!(matches!(
            dec.forward(&mut g, &store, b, &skips, false),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(count_parameters(&ParamStore::new()), 0);
        let mut store = ParamStore::new();
        Conv3d::new(&mut store, &mut rng(), "c", 4, 4, 1, 1, 0.01);
        assert_eq!(count_parameters(&store), 20);
        let count = |base| {
            let mut s = ParamStore::new();
            Encoder::new(
                &mut s,
                &mut rng(),
                "e",
                1,
                &BackboneConfig {
                    base_channels: base,
                    negative_slope: 0.01,
                },
            );
            count_parameters(&s)
        };
        assert!(count(4) < count(8));
    }
}
