//! Per-level expert heads on the concatenated-input encoder and their
//! injection into the segmentation decoder's skip connections.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{BackboneConfig, EncoderOutputs, NUM_LEVELS};
use crate::data::{TumorRegion, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::Conv3d;
use crate::params::ParamStore;

/// Levels that carry an expert.
pub const EXPERT_LEVELS: usize = NUM_LEVELS - 1;

#[derive(Clone, Debug)]
pub struct ExpertHead {
    pub level: usize,
    pub classifier: Conv3d,
    pub integrate: Conv3d,
    pub restore: Conv3d,
}

impl ExpertHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        level: usize,
        channels: usize,
    ) -> Result<Self> {
        if level == 0 || level > EXPERT_LEVELS {
            return Err(Error::Level(level));
        }
        Ok(ExpertHead {
            level,
            classifier: Conv3d::new(store, rng, &format!("{path}.cls"), channels, NUM_CLASSES, 1, 1, 1.0),
            integrate: Conv3d::new(store, rng, &format!("{path}.integrate"), 3 * channels, channels, 3, 1, 1.0),
            restore: Conv3d::new(store, rng, &format!("{path}.restore"), channels, channels, 1, 1, 1.0),
        })
    }
}

/// Four-class probabilities `[4, ...]` at the feature's own resolution.
pub fn expert_region_maps(g: &mut Graph, store: &ParamStore, feat: Var, head: &ExpertHead) -> Result<Var> {
    if g.value(feat).channels() != head.classifier.in_channels {
        return Err(Error::shape(format!(
            "expert {} expects {} channels, got {:?}",
            head.level,
            head.classifier.in_channels,
            g.shape(feat)
        )));
    }
    let logits = head.classifier.forward(g, store, feat);
    Ok(g.softmax(logits, 0))
}

/// Masks the features by each tumour map, concatenates and convolves back
/// to the level width.
pub fn integrate_expert_features(
    g: &mut Graph,
    store: &ParamStore,
    feat: Var,
    probs: Var,
    head: &ExpertHead,
) -> Result<Var> {
    if g.value(feat).spatial() != g.value(probs).spatial() || g.value(probs).channels() != NUM_CLASSES {
        return Err(Error::shape(format!(
            "maps {:?} do not match features {:?}",
            g.shape(probs),
            g.shape(feat)
        )));
    }
    let masked: Vec<Var> = TumorRegion::ALL
        .iter()
        .map(|r| {
            let p = g.slice(probs, 0, r.class_index(), 1);
            g.mul_channel_broadcast(feat, p)
        })
        .collect();
    let cat = g.concat(&masked, 0);
    let y = head.integrate.forward(g, store, cat);
    Ok(head.restore.forward(g, store, y))
}

/// `[F_Flair; F_T1c; F_T1; F_T2; F̄_e]` for decoder level `level`.
pub fn build_skip(g: &mut Graph, level: usize, modality_feats: &[Var], expert: Var) -> Result<Var> {
    if level == 0 || level > EXPERT_LEVELS {
        return Err(Error::Level(level));
    }
    if modality_feats.len() != 4 {
        return Err(Error::Arity {
            expected: 4,
            got: modality_feats.len(),
        });
    }
    let dims = g.value(expert).spatial();
    if modality_feats.iter().any(|&f| g.value(f).spatial() != dims) {
        return Err(Error::shape(format!("skip inputs at level {level} disagree on spatial dims")));
    }
    let mut all = modality_feats.to_vec();
    all.push(expert);
    Ok(g.concat(&all, 0))
}

#[derive(Clone, Debug)]
pub struct KiimiOutputs {
    /// Expert probabilities, index `l - 1`.
    pub maps: Vec<Var>,
    /// F̄_e per level, index `l - 1`.
    pub integrated: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Kiimi {
    pub heads: Vec<ExpertHead>,
}

impl Kiimi {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, cfg: &BackboneConfig) -> Result<Self> {
        let heads = (1..=EXPERT_LEVELS)
            .map(|l| ExpertHead::new(store, rng, &format!("{path}.expert{l}"), l, cfg.channels(l)))
            .collect::<Result<_>>()?;
        Ok(Kiimi { heads })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, extra: &EncoderOutputs) -> Result<KiimiOutputs> {
        let mut maps = Vec::with_capacity(EXPERT_LEVELS);
        let mut integrated = Vec::with_capacity(EXPERT_LEVELS);
        for head in &self.heads {
            let f = extra.level(head.level);
            let p = expert_region_maps(g, store, f, head)?;
            integrated.push(integrate_expert_features(g, store, f, p, head)?);
            maps.push(p);
        }
        Ok(KiimiOutputs { maps, integrated })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn head() -> (ParamStore, ExpertHead) {
        let mut store = ParamStore::new();
        let h = ExpertHead::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "x", 1, 2).unwrap();
        (store, h)
    }

    #[test]
    fn level_five_rejected() {
        let mut store = ParamStore::new();
        let err = ExpertHead::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "x", 5, 2).unwrap_err();
        assert!(matches!(err, Error::Level(5)));
        let mut g = Graph::eval();
        let z = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(build_skip(&mut g, 5, &[z, z, z, z], z), Err(Error::Level(5))));
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let (mut store, h) = head();
        *store.get_mut(h.classifier.weight) = Tensor::zeros(&[4, 2, 1, 1, 1]);
        let mut g = Graph::eval();
        let f = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64));
        let p = expert_region_maps(&mut g, &store, f, &h).unwrap();
        assert!(g.value(p).data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn zero_maps_restrain_everything() {
        let (mut store, h) = head();
        *store.get_mut(h.integrate.bias) = Tensor::zeros(&[2]);
        let mut g = Graph::eval();
        let f = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64 + 1.0));
        let mut p = Tensor::zeros(&[4, 2, 2, 2]);
        p.channel_mut(0).fill(1.0);
        let p = g.constant(p);
        let y = integrate_expert_features(&mut g, &store, f, p, &h).unwrap();
        assert!(g.value(y).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn skip_width_and_locality() {
        let mut g = Graph::eval();
        let feats: Vec<Var> = (0..4)
            .map(|m| g.constant(Tensor::full(&[4, 2, 2, 2], m as f64)))
            .collect();
        let e = g.constant(Tensor::full(&[4, 2, 2, 2], 9.0));
        let s = build_skip(&mut g, 1, &feats, e).unwrap();
        assert_eq!(g.shape(s), &[20, 2, 2, 2]);
        let z = g.constant(Tensor::zeros(&[4, 2, 2, 2]));
        let s0 = build_skip(&mut g, 1, &feats, z).unwrap();
        let (a, b) = (g.value(s).data(), g.value(s0).data());
        assert_eq!(a[..128], b[..128]);
        assert!(b[128..].iter().all(|&x| x == 0.0));
    }
}
