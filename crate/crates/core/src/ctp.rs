//! Tumour prototype construction: per-modality self-attention on the
//! bottleneck tokens, pairwise cross-modal attention, aggregation, the
//! token-wise FFN with a four-class region head, and prototype pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{TumorRegion, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{AttentionTrace, Conv3d, LayerNorm, Linear, MultiHeadAttention, SelfAttentionBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NUM_MODALITIES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtpConfig {
    /// Token width C′.
    pub token_width: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Divide prototypes by the summed probability instead of the voxel
    /// count.
    pub masked_average: bool,
}

impl CtpConfig {
    pub fn new(token_width: usize) -> Self {
        CtpConfig {
            token_width,
            heads: 8,
            dropout: 0.1,
            masked_average: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.token_width == 0 || self.token_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "token width {} is not divisible by {} heads",
                self.token_width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Channel projection C → C′ followed by a pre-norm residual self-attention
/// layer.
#[derive(Clone, Debug)]
pub struct SelfAttend {
    pub project: Linear,
    pub block: SelfAttentionBlock,
}

impl SelfAttend {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        in_channels: usize,
        cfg: &CtpConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(SelfAttend {
            project: Linear::new(store, rng, &format!("{path}.proj"), in_channels, cfg.token_width, true),
            block: SelfAttentionBlock::new(store, rng, &format!("{path}.mhsa"), cfg.token_width, cfg.heads, true),
        })
    }
}

/// Bottleneck map `[C, h, w, d]` to attended tokens `[hwd, C′]`.
pub fn self_attend(g: &mut Graph, store: &ParamStore, feat: Var, layer: &SelfAttend) -> Result<AttentionTrace> {
    let c = g.value(feat).channels();
    if c != layer.project.in_features {
        return Err(Error::shape(format!(
            "self-attention expects {} channels, got {c}",
            layer.project.in_features
        )));
    }
    let tokens = g.to_tokens(feat);
    let projected = layer.project.forward(g, store, tokens);
    Ok(layer.block.forward(g, store, projected))
}

/// Attention of one modality's queries over another modality's keys and
/// values, each side with its own layer norm.
#[derive(Clone, Debug)]
pub struct CrossAttend {
    pub norm_current: LayerNorm,
    pub norm_other: LayerNorm,
    pub attention: MultiHeadAttention,
}

impl CrossAttend {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, cfg: &CtpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(CrossAttend {
            norm_current: LayerNorm::new(store, &format!("{path}.norm_q"), cfg.token_width),
            norm_other: LayerNorm::new(store, &format!("{path}.norm_kv"), cfg.token_width),
            attention: MultiHeadAttention::new(store, rng, &format!("{path}.attn"), cfg.token_width, cfg.heads),
        })
    }
}

pub fn cross_attend(
    g: &mut Graph,
    store: &ParamStore,
    current: Var,
    other: Var,
    layer: &CrossAttend,
) -> Result<AttentionTrace> {
    if g.shape(current) != g.shape(other) || g.shape(current).len() != 2 {
        return Err(Error::shape(format!(
            "cross attention needs equal token shapes, got {:?} and {:?}",
            g.shape(current),
            g.shape(other)
        )));
    }
    if g.shape(current)[1] != layer.attention.width {
        return Err(Error::shape(format!(
            "token width {} does not match attention width {}",
            g.shape(current)[1],
            layer.attention.width
        )));
    }
    let q = layer.norm_current.forward(g, store, current);
    let kv = layer.norm_other.forward(g, store, other);
    let mut trace = layer.attention.forward(g, store, q, kv);
    if g.fault_armed("cross_attend") {
        trace.output = g.flip_grad(trace.output);
    }
    Ok(trace)
}

/// Sum of the three cross-attention outputs and the modality's own tokens.
pub fn aggregate_interaction(g: &mut Graph, current: Var, cross: &[Var]) -> Result<Var> {
    if cross.len() != NUM_MODALITIES - 1 {
        return Err(Error::Arity {
            expected: NUM_MODALITIES - 1,
            got: cross.len(),
        });
    }
    for &c in cross {
        if g.shape(c) != g.shape(current) {
            return Err(Error::shape(format!(
                "cross output {:?} does not match current {:?}",
                g.shape(c),
                g.shape(current)
            )));
        }
    }
    let mut all = cross.to_vec();
    all.push(current);
    Ok(g.add_n(&all))
}

/// Token FFN followed by the four-class region head.
#[derive(Clone, Debug)]
pub struct RegionHead {
    pub expand: Linear,
    pub contract: Linear,
    pub classifier: Conv3d,
    pub dropout: f64,
}

impl RegionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, cfg: &CtpConfig) -> Self {
        let w = cfg.token_width;
        RegionHead {
            expand: Linear::new(store, rng, &format!("{path}.ffn1"), w, 4 * w, true),
            contract: Linear::new(store, rng, &format!("{path}.ffn2"), 4 * w, w, true),
            classifier: Conv3d::new(store, rng, &format!("{path}.cls"), w, NUM_CLASSES, 1, 1, 1.0),
            dropout: cfg.dropout,
        }
    }
}

/// Feature map F̃ `[C′, h, w, d]` and its four-class probabilities.
#[derive(Clone, Copy, Debug)]
pub struct RegionMaps {
    pub features: Var,
    pub probs: Var,
}

impl RegionMaps {
    /// Single-channel `[1, h, w, d]` probability of `region`.
    pub fn region(&self, g: &mut Graph, region: TumorRegion) -> Var {
        g.slice(self.probs, 0, region.class_index(), 1)
    }
}

pub fn generate_region_maps(
    g: &mut Graph,
    store: &ParamStore,
    interacted: Var,
    dims: [usize; 3],
    head: &RegionHead,
) -> Result<RegionMaps> {
    let n: usize = dims.iter().product();
    if g.shape(interacted).len() != 2 || g.shape(interacted)[0] != n {
        return Err(Error::shape(format!(
            "{:?} tokens do not unflatten to {dims:?}",
            g.shape(interacted)
        )));
    }
    let h = head.expand.forward(g, store, interacted);
    let h = g.gelu(h);
    let h = g.dropout(h, head.dropout);
    let h = head.contract.forward(g, store, h);
    let features = g.from_tokens(h, dims);
    let logits = head.classifier.forward(g, store, features);
    let probs = g.softmax(logits, 0);
    Ok(RegionMaps { features, probs })
}

/// Probability-weighted pooling of `features` `[C′, h, w, d]` by `map`
/// `[1, h, w, d]`, divided by the voxel count (or by `Σ map` when
/// `masked_average`). Returns `[C′]`.
pub fn compute_prototype(g: &mut Graph, features: Var, map: Var, masked_average: bool) -> Result<Var> {
    let (fs, ms) = (g.value(features).spatial(), g.value(map).spatial());
    if fs != ms || g.value(map).channels() != 1 {
        return Err(Error::shape(format!(
            "prototype map {:?} does not match features {:?}",
            g.shape(map),
            g.shape(features)
        )));
    }
    let weighted = g.mul_channel_broadcast(features, map);
    let sums = g.spatial_sum(weighted);
    if !masked_average {
        let n = g.value(features).voxels() as f64;
        return Ok(g.scale(sums, 1.0 / n));
    }
    let mass = g.spatial_sum(map);
    Ok(divide_by_scalar(g, sums, mass))
}

/// `v / s` for `v: [c]`, `s: [1]`.
fn divide_by_scalar(g: &mut Graph, v: Var, s: Var) -> Var {
    let denom = g.value(s).item() + f64::MIN_POSITIVE;
    let value = g.value(v).map(|x| x / denom);
    g.custom(
        value,
        &[v, s],
        Box::new(move |ctx| {
            let dv = ctx.grad.map(|x| x / denom);
            let dot: f64 = ctx.grad.data().iter().zip(ctx.output.data()).map(|(a, b)| a * b).sum();
            vec![Some(dv), Some(Tensor::scalar(-dot / denom))]
        }),
    )
}

/// Everything the prototype stage produces for one case.
#[derive(Clone, Debug)]
pub struct CtpOutputs {
    /// Self-attended tokens F^sa per modality.
    pub attended: Vec<Var>,
    /// F̃ and region probabilities per modality.
    pub maps: Vec<RegionMaps>,
    /// `prototypes[m][r]` is the `[C′]` prototype of modality `m`, region `r`.
    pub prototypes: Vec<Vec<Var>>,
    /// Bottleneck grid.
    pub dims: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct Ctp {
    pub cfg: CtpConfig,
    pub self_attn: Vec<SelfAttend>,
    /// Index `c * 3 + k` is modality `c` attending to its `k`-th other.
    pub cross: Vec<CrossAttend>,
    pub heads: Vec<RegionHead>,
}

/// The three other modalities of `c`, in canonical order.
pub fn others(c: usize) -> impl Iterator<Item = usize> {
    (0..NUM_MODALITIES).filter(move |&o| o != c)
}

impl Ctp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        in_channels: usize,
        cfg: &CtpConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut self_attn = Vec::new();
        let mut cross = Vec::new();
        let mut heads = Vec::new();
        for c in 0..NUM_MODALITIES {
            self_attn.push(SelfAttend::new(store, rng, &format!("{path}.sa{c}"), in_channels, cfg)?);
        }
        for c in 0..NUM_MODALITIES {
            for o in others(c) {
                cross.push(CrossAttend::new(store, rng, &format!("{path}.ca{c}from{o}"), cfg)?);
            }
        }
        for c in 0..NUM_MODALITIES {
            heads.push(RegionHead::new(store, rng, &format!("{path}.pfg{c}"), cfg));
        }
        Ok(Ctp {
            cfg: cfg.clone(),
            self_attn,
            cross,
            heads,
        })
    }

    /// `bottlenecks[m]` is the level-5 map of modality encoder `m`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bottlenecks: &[Var]) -> Result<CtpOutputs> {
        if bottlenecks.len() != NUM_MODALITIES {
            return Err(Error::Arity {
                expected: NUM_MODALITIES,
                got: bottlenecks.len(),
            });
        }
        let dims = g.value(bottlenecks[0]).spatial();
        let attended = bottlenecks
            .iter()
            .zip(&self.self_attn)
            .map(|(&b, layer)| self_attend(g, store, b, layer).map(|t| t.output))
            .collect::<Result<Vec<_>>>()?;
        let mut maps = Vec::with_capacity(NUM_MODALITIES);
        let mut prototypes = Vec::with_capacity(NUM_MODALITIES);
        for c in 0..NUM_MODALITIES {
            let mut cross = Vec::with_capacity(3);
            for (k, o) in others(c).enumerate() {
                let t = cross_attend(g, store, attended[c], attended[o], &self.cross[c * 3 + k])?;
                cross.push(t.output);
            }
            let interacted = aggregate_interaction(g, attended[c], &cross)?;
            let rm = generate_region_maps(g, store, interacted, dims, &self.heads[c])?;
            let mut protos = Vec::with_capacity(3);
            for r in TumorRegion::ALL {
                let p = rm.region(g, r);
                protos.push(compute_prototype(g, rm.features, p, self.cfg.masked_average)?);
            }
            maps.push(rm);
            prototypes.push(protos);
        }
        Ok(CtpOutputs {
            attended,
            maps,
            prototypes,
            dims,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn cfg(width: usize, heads: usize) -> CtpConfig {
        CtpConfig {
            token_width: width,
            heads,
            dropout: 0.0,
            masked_average: false,
        }
    }

    #[test]
    fn indivisible_width_is_config_error() {
        let mut store = ParamStore::new();
        let err = SelfAttend::new(&mut store, &mut rng(), "s", 8, &cfg(10, 8)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_token_self_attention_is_residual_plus_value() {
        let mut store = ParamStore::new();
        let layer = SelfAttend::new(&mut store, &mut rng(), "s", 4, &cfg(8, 2)).unwrap();
        let mut g = Graph::eval();
        let x = g.constant(Tensor::from_fn(&[4, 1, 1, 1], |i| i as f64 - 1.5));
        let t = self_attend(&mut g, &store, x, &layer).unwrap();
        for w in &t.weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut store = ParamStore::new();
        let layer = SelfAttend::new(&mut store, &mut rng(), "s", 3, &cfg(4, 2)).unwrap();
        let mut g = Graph::eval();
        let x = g.constant(Tensor::from_fn(&[3, 2, 1, 2], |i| [0.3, -1.0, 2.0][i / 4]));
        let out = self_attend(&mut g, &store, x, &layer).unwrap().output;
        let v = g.value(out);
        for t in 1..4 {
            for c in 0..4 {
                assert!((v.data()[t * 4 + c] - v.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_checks_arity_and_sums() {
        let mut g = Graph::eval();
        let f = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let a = g.constant(Tensor::full(&[2, 3], 1.0));
        assert!(matches!(
            aggregate_interaction(&mut g, f, &[a, a]),
            Err(Error::Arity { expected: 3, got: 2 })
        ));
        let s = aggregate_interaction(&mut g, f, &[a, a, a]).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn zero_classifier_is_uniform_and_bias_dominates() {
        let mut store = ParamStore::new();
        let head = RegionHead::new(&mut store, &mut rng(), "h", &cfg(4, 2));
        *store.get_mut(head.classifier.weight) = Tensor::zeros(&[4, 4, 1, 1, 1]);
        let mut g = Graph::eval();
        let tokens = g.constant(Tensor::from_fn(&[8, 4], |i| (i as f64).cos()));
        let rm = generate_region_maps(&mut g, &store, tokens, [2, 2, 2], &head).unwrap();
        assert!(g.value(rm.probs).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        *store.get_mut(head.classifier.bias) = Tensor::from_vec(&[4], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::eval();
        let tokens = g.constant(Tensor::from_fn(&[8, 4], |i| (i as f64).cos()));
        let rm = generate_region_maps(&mut g, &store, tokens, [2, 2, 2], &head).unwrap();
        let expected = 1.0 / (1.0 + 3.0 * (-10f64).exp());
        assert!(g.value(rm.probs).channel(0).iter().all(|&p| (p - expected).abs() < 1e-12));
        assert!((expected - 0.999864).abs() < 1e-6);
    }

    #[test]
    fn prototype_reductions() {
        let mut g = Graph::eval();
        let f = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64));
        let ones = g.constant(Tensor::full(&[1, 2, 2, 2], 1.0));
        let v = compute_prototype(&mut g, f, ones, false).unwrap();
        assert_eq!(g.value(v).data(), &[3.5, 11.5]);
        let mut hot = Tensor::zeros(&[1, 2, 2, 2]);
        hot.data_mut()[5] = 1.0;
        let hot = g.constant(hot);
        let v = compute_prototype(&mut g, f, hot, false).unwrap();
        assert_eq!(g.value(v).data(), &[5.0 / 8.0, 13.0 / 8.0]);
        let v = compute_prototype(&mut g, f, hot, true).unwrap();
        assert_eq!(g.value(v).data(), &[5.0, 13.0]);
    }

    #[test]
    fn full_stage_produces_twelve_prototypes() {
        let mut store = ParamStore::new();
        let ctp = Ctp::new(&mut store, &mut rng(), "ctp", 8, &cfg(8, 2)).unwrap();
        let mut g = Graph::eval();
        let b: Vec<Var> = (0..4)
            .map(|m| g.constant(Tensor::from_fn(&[8, 2, 2, 2], |i| ((i + m) as f64 * 0.7).sin())))
            .collect();
        let out = ctp.forward(&mut g, &store, &b).unwrap();
        assert_eq!(out.prototypes.iter().flatten().count(), 12);
        for p in out.prototypes.iter().flatten() {
            assert_eq!(g.shape(*p), &[8]);
        }
        assert_eq!(ctp.cross.len(), 12);
    }
}
