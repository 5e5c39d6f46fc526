//! Full network wiring: four modality encoders, the concatenated-input
//! encoder, prototype construction, prototype-driven fusion, expert skips,
//! the segmentation decoder and the shared auxiliary decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::backbone::{BackboneConfig, Decoder, DecoderInputs, Encoder, EncoderOutputs, NUM_LEVELS};
use crate::ctp::{Ctp, CtpConfig, CtpOutputs, NUM_MODALITIES};
use crate::data::{LabelMap, Modality};
use crate::error::{Error, Result};
use crate::kiimi::{build_skip, Kiimi, KiimiOutputs, EXPERT_LEVELS};
use crate::losses::{
    ctp_loss, deep_supervision_loss, expert_loss, share_loss, total_loss, LossBreakdown, LossWeights,
};
use crate::params::ParamStore;
use crate::pfrf::{Pfrf, PfrfConfig, PfrfOutputs};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Prototype, fusion and expert modules enabled.
    Full,
    /// Plain U-Net over the modality encoders with concatenated skips.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub negative_slope: f64,
    pub variant: Variant,
    /// Token width C′; 0 selects the bottleneck width.
    pub token_width: usize,
    pub heads: usize,
    pub dropout: f64,
    pub masked_average_prototype: bool,
    pub single_channel_activation: bool,
    pub fusion_residual: bool,
    /// Seed of the parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 4,
            negative_slope: 0.01,
            variant: Variant::Full,
            token_width: 0,
            heads: 8,
            dropout: 0.1,
            masked_average_prototype: false,
            single_channel_activation: false,
            fusion_residual: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            base_channels: self.base_channels,
            negative_slope: self.negative_slope,
        }
    }

    pub fn bottleneck_width(&self) -> usize {
        self.backbone().channels(NUM_LEVELS)
    }

    pub fn resolved_token_width(&self) -> usize {
        if self.token_width == 0 {
            self.bottleneck_width()
        } else {
            self.token_width
        }
    }

    pub fn ctp(&self) -> CtpConfig {
        CtpConfig {
            token_width: self.resolved_token_width(),
            heads: self.heads,
            dropout: self.dropout,
            masked_average: self.masked_average_prototype,
        }
    }

    pub fn pfrf(&self) -> PfrfConfig {
        PfrfConfig {
            token_width: self.resolved_token_width(),
            modal_width: self.bottleneck_width(),
            heads: self.heads,
            single_channel_activation: self.single_channel_activation,
            fusion_residual: self.fusion_residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.variant == Variant::Full {
            self.ctp().validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the architecture-defining fields.
    pub fn fingerprint(&self) -> String {
        let arch = ModelConfig {
            init_seed: 0,
            dropout: 0.0,
            ..self.clone()
        };
        let json = serde_json::to_string(&arch).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything one forward pass exposes.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Final `[4, h, w, d]` probabilities from the segmentation decoder.
    pub output: Var,
    /// Segmentation decoder block fields, index `b - 1` (training only).
    pub seg_blocks: Vec<Var>,
    pub modal_levels: Vec<EncoderOutputs>,
    pub extra_levels: Option<EncoderOutputs>,
    pub ctp: Option<CtpOutputs>,
    pub pfrf: Option<PfrfOutputs>,
    pub kiimi: Option<KiimiOutputs>,
    /// Shared decoder outputs: four modality branches then the expert
    /// branch (training only).
    pub share: Vec<Var>,
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ctp: Option<Var>,
    pub share: Option<Var>,
    pub expert: Option<Var>,
    pub deep: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossBreakdown {
            ctp: v(self.ctp),
            share: v(self.share),
            expert: v(self.expert),
            deep: g.value(self.deep).item(),
            total: g.value(self.total).item(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoders: Vec<Encoder>,
    extra: Option<Encoder>,
    ctp: Option<Ctp>,
    pfrf: Option<Pfrf>,
    kiimi: Option<Kiimi>,
    seg: Decoder,
    share: Option<Decoder>,
}

/// Parameter path prefix of each top-level component.
pub fn encoder_path(m: Modality) -> String {
    format!("enc.{}", m.suffix())
}

pub const EXTRA_ENCODER_PATH: &str = "enc.concat";

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let bb = cfg.backbone();
        let encoders: Vec<Encoder> = Modality::ALL
            .iter()
            .map(|&m| Encoder::new(&mut store, &mut rng, &encoder_path(m), 1, &bb))
            .collect();
        let c = |l: usize| bb.channels(l);
        let (extra, ctp, pfrf, kiimi, seg, share) = match cfg.variant {
            Variant::Full => {
                let extra = Encoder::new(&mut store, &mut rng, EXTRA_ENCODER_PATH, NUM_MODALITIES, &bb);
                let ctp = Ctp::new(&mut store, &mut rng, "ctp", c(NUM_LEVELS), &cfg.ctp())?;
                let pfrf = Pfrf::new(&mut store, &mut rng, "pfrf", &cfg.pfrf())?;
                let kiimi = Kiimi::new(&mut store, &mut rng, "kiimi", &bb)?;
                let seg = Decoder::new(
                    &mut store,
                    &mut rng,
                    "dec.seg",
                    DecoderInputs {
                        bottleneck: 4 * cfg.pfrf().modal_width,
                        skips: [1, 2, 3, 4].map(|l| 5 * c(l)),
                    },
                    &bb,
                );
                let share = Decoder::new(
                    &mut store,
                    &mut rng,
                    "dec.share",
                    DecoderInputs {
                        bottleneck: c(NUM_LEVELS),
                        skips: [1, 2, 3, 4].map(c),
                    },
                    &bb,
                );
                (Some(extra), Some(ctp), Some(pfrf), Some(kiimi), seg, Some(share))
            }
            Variant::Baseline => {
                let seg = Decoder::new(
                    &mut store,
                    &mut rng,
                    "dec.seg",
                    DecoderInputs {
                        bottleneck: 4 * c(NUM_LEVELS),
                        skips: [1, 2, 3, 4].map(|l| 4 * c(l)),
                    },
                    &bb,
                );
                (None, None, None, None, seg, None)
            }
        };
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoders,
            extra,
            ctp,
            pfrf,
            kiimi,
            seg,
            share,
        })
    }

    /// `input` is `[4, h, w, d]` in canonical modality order. With
    /// `training_heads`, deep-supervision fields and the shared decoder are
    /// evaluated too.
    pub fn forward(&self, g: &mut Graph, input: Var, training_heads: bool) -> Result<ForwardOutputs> {
        let store = &self.store;
        if g.value(input).channels() != NUM_MODALITIES || g.shape(input).len() != 4 {
            return Err(Error::shape(format!(
                "model input must be [4, h, w, d], got {:?}",
                g.shape(input)
            )));
        }
        let mut modal_levels = Vec::with_capacity(NUM_MODALITIES);
        for (m, enc) in self.encoders.iter().enumerate() {
            let x = g.slice(input, 0, m, 1);
            modal_levels.push(enc.forward(g, store, x)?);
        }
        let level_stack = |l: usize| -> Vec<Var> { modal_levels.iter().map(|e| e.level(l)).collect() };

        if self.cfg.variant == Variant::Baseline {
            let bottleneck = {
                let v = level_stack(NUM_LEVELS);
                g.concat(&v, 0)
            };
            let mut skips = Vec::with_capacity(EXPERT_LEVELS);
            for l in 1..=EXPERT_LEVELS {
                let v = level_stack(l);
                skips.push(g.concat(&v, 0));
            }
            let dec = self.seg.forward(g, store, bottleneck, &skips, training_heads)?;
            return Ok(ForwardOutputs {
                output: dec.output,
                seg_blocks: dec.blocks,
                modal_levels,
                extra_levels: None,
                ctp: None,
                pfrf: None,
                kiimi: None,
                share: Vec::new(),
            });
        }

        let extra = self.extra.as_ref().expect("full variant").forward(g, store, input)?;
        let bottlenecks = level_stack(NUM_LEVELS);
        let ctp = self.ctp.as_ref().expect("full variant").forward(g, store, &bottlenecks)?;
        let pfrf = self.pfrf.as_ref().expect("full variant").forward(g, store, &ctp)?;
        let kiimi = self.kiimi.as_ref().expect("full variant").forward(g, store, &extra)?;
        let mut skips = Vec::with_capacity(EXPERT_LEVELS);
        for l in 1..=EXPERT_LEVELS {
            let v = level_stack(l);
            skips.push(build_skip(g, l, &v, kiimi.integrated[l - 1])?);
        }
        let dec = self.seg.forward(g, store, pfrf.fused, &skips, training_heads)?;

        let mut share = Vec::new();
        if training_heads {
            let shared = self.share.as_ref().expect("full variant");
            for m in 0..NUM_MODALITIES {
                let skips: Vec<Var> = (1..=EXPERT_LEVELS).map(|l| modal_levels[m].level(l)).collect();
                share.push(shared.forward(g, store, pfrf.modal[m], &skips, false)?.output);
            }
            share.push(
                shared
                    .forward(g, store, extra.level(NUM_LEVELS), &kiimi.integrated, false)?
                    .output,
            );
        }
        Ok(ForwardOutputs {
            output: dec.output,
            seg_blocks: dec.blocks,
            modal_levels,
            extra_levels: Some(extra),
            ctp: Some(ctp),
            pfrf: Some(pfrf),
            kiimi: Some(kiimi),
            share,
        })
    }

    /// Training objective for a forward pass run with `training_heads`.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOutputs, labels: &LabelMap, w: &LossWeights) -> Result<LossVars> {
        let w = w.resolve(labels);
        let truth = labels.one_hot();
        if truth.spatial() != g.value(out.output).spatial() {
            return Err(Error::shape("labels do not match the prediction grid"));
        }
        let deep = deep_supervision_loss(g, &out.seg_blocks, &truth, &w)?;
        match (&out.ctp, &out.kiimi) {
            (Some(ctp), Some(kiimi)) => {
                let maps: Vec<Var> = ctp.maps.iter().map(|m| m.probs).collect();
                let l_ctp = ctp_loss(g, &maps, &truth, &w)?;
                let l_share = share_loss(g, &out.share, &truth, &w)?;
                let l_exp = expert_loss(g, &kiimi.maps, labels, &w)?;
                let total = total_loss(g, &[l_ctp, l_share, l_exp, deep])?;
                Ok(LossVars {
                    total,
                    ctp: Some(l_ctp),
                    share: Some(l_share),
                    expert: Some(l_exp),
                    deep,
                })
            }
            _ => Ok(LossVars {
                total: deep,
                ctp: None,
                share: None,
                expert: None,
                deep,
            }),
        }
    }

    /// Plain evaluation-mode forward on a `[4, h, w, d]` tensor.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval();
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, x, false)?;
        Ok(g.value(out.output).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_architecture_only() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            init_seed: 9,
            ..a.clone()
        };
        let c = ModelConfig {
            base_channels: 8,
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn baseline_has_fewer_parameters() {
        let full = Model::new(&ModelConfig::default()).unwrap();
        let base = Model::new(&ModelConfig {
            variant: Variant::Baseline,
            ..Default::default()
        })
        .unwrap();
        assert!(base.parameter_count() < full.parameter_count());
        assert!(full.store.count_prefix("dec.share") > 0);
        assert_eq!(base.store.count_prefix("ctp"), 0);
    }

    #[test]
    fn share_decoder_never_touches_seg_output() {
        let model = Model::new(&ModelConfig {
            base_channels: 2,
            heads: 2,
            ..Default::default()
        })
        .unwrap();
        let input = Tensor::from_fn(&[4, 16, 16, 16], |i| ((i * 31) % 17) as f64 / 8.0 - 1.0);
        let before = model.predict(&input).unwrap();
        let mut mutated = model.clone();
        let ids: Vec<_> = mutated
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with("dec.share"))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            mutated.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.5);
        }
        assert_eq!(mutated.predict(&input).unwrap(), before);
    }
}
