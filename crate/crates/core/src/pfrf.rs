//! Prototype-driven feature highlighting and cross-modality fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::ctp::{CtpOutputs, NUM_MODALITIES};
use crate::data::TumorRegion;
use crate::error::{Error, Result};
use crate::nn::{AttentionTrace, Conv3d, Linear, SelfAttentionBlock};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfrfConfig {
    pub token_width: usize,
    /// Width of F̂^h per modality; the fused map is four times this.
    pub modal_width: usize,
    pub heads: usize,
    /// One activation channel broadcast over all feature channels.
    pub single_channel_activation: bool,
    pub fusion_residual: bool,
}

/// Prototype drive module: linear map of the prototype, broadcast, concat
/// with F̃, 1×1×1 conv and ReLU.
#[derive(Clone, Debug)]
pub struct Pdm {
    pub map: Linear,
    pub gate: Conv3d,
}

impl Pdm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, cfg: &PfrfConfig) -> Self {
        let w = cfg.token_width;
        let out = if cfg.single_channel_activation { 1 } else { w };
        Pdm {
            map: Linear::new(store, rng, &format!("{path}.map"), w, w, true),
            gate: Conv3d::new(store, rng, &format!("{path}.gate"), 2 * w, out, 1, 1, 0.0),
        }
    }
}

/// Returns the activation map A and the highlighted features F̃ ⊙ A.
pub fn drive_with_prototype(
    g: &mut Graph,
    store: &ParamStore,
    features: Var,
    proto: Var,
    pdm: &Pdm,
) -> Result<(Var, Var)> {
    let width = pdm.map.in_features;
    if g.shape(proto) != [width] || g.value(features).channels() != width {
        return Err(Error::shape(format!(
            "prototype {:?} / features {:?} do not match width {width}",
            g.shape(proto),
            g.shape(features)
        )));
    }
    let dims = g.value(features).spatial();
    let row = g.reshape(proto, &[1, width]);
    let mapped = pdm.map.forward(g, store, row);
    let mapped = g.reshape(mapped, &[width]);
    let v = g.broadcast_spatial(mapped, dims);
    let joined = g.concat(&[v, features], 0);
    let a = pdm.gate.forward(g, store, joined);
    let a = g.relu(a);
    let highlighted = if g.value(a).channels() == 1 {
        g.mul_channel_broadcast(features, a)
    } else {
        g.mul(features, a)
    };
    Ok((a, highlighted))
}

/// 3³ conv over the three highlighted maps, then 1×1×1 integration.
#[derive(Clone, Debug)]
pub struct Assemble {
    pub conv: Conv3d,
    pub integrate: Conv3d,
}

impl Assemble {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, cfg: &PfrfConfig) -> Self {
        let w = cfg.token_width;
        Assemble {
            conv: Conv3d::new(store, rng, &format!("{path}.conv"), 3 * w, w, 3, 1, 1.0),
            integrate: Conv3d::new(store, rng, &format!("{path}.integrate"), w, cfg.modal_width, 1, 1, 1.0),
        }
    }
}

pub fn assemble_modal_features(g: &mut Graph, store: &ParamStore, highlighted: &[Var], asm: &Assemble) -> Result<Var> {
    if highlighted.len() != 3 {
        return Err(Error::Arity {
            expected: 3,
            got: highlighted.len(),
        });
    }
    let s0 = g.shape(highlighted[0]).to_vec();
    if highlighted.iter().any(|&h| g.shape(h) != s0.as_slice()) || s0[0] * 3 != asm.conv.in_channels {
        return Err(Error::shape("highlighted maps must share shape and width"));
    }
    let cat = g.concat(highlighted, 0);
    let y = asm.conv.forward(g, store, cat);
    Ok(asm.integrate.forward(g, store, y))
}

/// Concatenates the four modal maps and applies multi-head self-attention
/// over the bottleneck tokens.
pub fn fuse_modalities(g: &mut Graph, store: &ParamStore, modal: &[Var], block: &SelfAttentionBlock) -> Result<(Var, AttentionTrace)> {
    if modal.len() != NUM_MODALITIES {
        return Err(Error::Arity {
            expected: NUM_MODALITIES,
            got: modal.len(),
        });
    }
    let s0 = g.shape(modal[0]).to_vec();
    if modal.iter().any(|&m| g.shape(m) != s0.as_slice()) || 4 * s0[0] != block.attention.width {
        return Err(Error::shape("modal maps must share shape and sum to the fusion width"));
    }
    let dims = g.value(modal[0]).spatial();
    let cat = g.concat(modal, 0);
    let tokens = g.to_tokens(cat);
    let trace = block.forward(g, store, tokens);
    Ok((g.from_tokens(trace.output, dims), trace))
}

#[derive(Clone, Debug)]
pub struct PfrfOutputs {
    /// `activations[m][r]`.
    pub activations: Vec<Vec<Var>>,
    /// F̂^h per modality.
    pub modal: Vec<Var>,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct Pfrf {
    pub cfg: PfrfConfig,
    /// Index `m * 3 + r`.
    pub pdm: Vec<Pdm>,
    pub assemble: Vec<Assemble>,
    pub fuse: SelfAttentionBlock,
}

impl Pfrf {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, cfg: &PfrfConfig) -> Result<Self> {
        let fused = 4 * cfg.modal_width;
        if cfg.heads == 0 || fused % cfg.heads != 0 {
            return Err(Error::Config(format!("fusion width {fused} is not divisible by {} heads", cfg.heads)));
        }
        let mut pdm = Vec::new();
        for m in 0..NUM_MODALITIES {
            for r in TumorRegion::ALL {
                pdm.push(Pdm::new(store, rng, &format!("{path}.pdm{m}.{}", r.slug()), cfg));
            }
        }
        let assemble = (0..NUM_MODALITIES)
            .map(|m| Assemble::new(store, rng, &format!("{path}.asm{m}"), cfg))
            .collect();
        let fuse = SelfAttentionBlock::new(store, rng, &format!("{path}.fuse"), fused, cfg.heads, cfg.fusion_residual);
        Ok(Pfrf {
            cfg: cfg.clone(),
            pdm,
            assemble,
            fuse,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ctp: &CtpOutputs) -> Result<PfrfOutputs> {
        let mut activations = Vec::with_capacity(NUM_MODALITIES);
        let mut modal = Vec::with_capacity(NUM_MODALITIES);
        for m in 0..NUM_MODALITIES {
            let mut acts = Vec::with_capacity(3);
            let mut hs = Vec::with_capacity(3);
            for r in 0..3 {
                let (a, h) = drive_with_prototype(
                    g,
                    store,
                    ctp.maps[m].features,
                    ctp.prototypes[m][r],
                    &self.pdm[m * 3 + r],
                )?;
                acts.push(a);
                hs.push(h);
            }
            modal.push(assemble_modal_features(g, store, &hs, &self.assemble[m])?);
            activations.push(acts);
        }
        let (fused, _) = fuse_modalities(g, store, &modal, &self.fuse)?;
        Ok(PfrfOutputs {
            activations,
            modal,
            fused,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn cfg() -> PfrfConfig {
        PfrfConfig {
            token_width: 4,
            modal_width: 2,
            heads: 2,
            single_channel_activation: false,
            fusion_residual: true,
        }
    }

    fn fixture(bias: f64) -> (ParamStore, Pdm) {
        let mut store = ParamStore::new();
        let pdm = Pdm::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "p", &cfg());
        *store.get_mut(pdm.gate.weight) = Tensor::zeros(&[4, 8, 1, 1, 1]);
        *store.get_mut(pdm.gate.bias) = Tensor::full(&[4], bias);
        (store, pdm)
    }

    #[test]
    fn unit_gate_is_identity_and_negative_gate_annihilates() {
        for (bias, keep) in [(1.0, true), (-1.0, false)] {
            let (store, pdm) = fixture(bias);
            let mut g = Graph::eval();
            let f = g.constant(Tensor::from_fn(&[4, 2, 2, 2], |i| (i as f64).sin()));
            let p = g.constant(Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
            let (a, h) = drive_with_prototype(&mut g, &store, f, p, &pdm).unwrap();
            assert!(g.value(a).data().iter().all(|&x| x >= 0.0));
            if keep {
                assert_eq!(g.value(h), g.value(f));
            } else {
                assert!(g.value(h).data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let (store, pdm) = fixture(1.0);
        let mut g = Graph::eval();
        let f = g.constant(Tensor::zeros(&[4, 2, 2, 2]));
        let p = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            drive_with_prototype(&mut g, &store, f, p, &pdm),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn assemble_zero_in_zero_out() {
        let mut store = ParamStore::new();
        let asm = Assemble::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), "a", &cfg());
        let mut g = Graph::eval();
        let z = g.constant(Tensor::zeros(&[4, 2, 2, 2]));
        let y = assemble_modal_features(&mut g, &store, &[z, z, z], &asm).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 2, 2]);
        assert!(g.value(y).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fusion_of_identical_tokens_is_uniform() {
        let mut store = ParamStore::new();
        let block = SelfAttentionBlock::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), "f", 8, 2, true);
        let mut g = Graph::eval();
        let m = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| [0.5, -2.0][i / 8]));
        let (y, _) = fuse_modalities(&mut g, &store, &[m, m, m, m], &block).unwrap();
        let v = g.value(y);
        for c in 0..8 {
            let ch = v.channel(c);
            assert!(ch.iter().all(|&x| (x - ch[0]).abs() < 1e-12));
        }
    }
}
