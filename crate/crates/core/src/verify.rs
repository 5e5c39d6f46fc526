//! Self-verification suites: finite-difference gradients, brute-force
//! oracles, probability normalisation, the forward shape contract,
//! determinism and loss sanity. Each check yields one [`CheckResult`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Block, NUM_LEVELS};
use crate::config::PhantomConfig;
use crate::ctp::{
    compute_prototype, cross_attend, generate_region_maps, self_attend, CrossAttend, CtpConfig, RegionHead,
    SelfAttend,
};
use crate::data::{normalize_case, LabelMap, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckOptions};
use crate::kiimi::{expert_region_maps, integrate_expert_features, ExpertHead, EXPERT_LEVELS};
use crate::losses::{
    combined_loss, ctp_loss, deep_supervision_loss, dice_loss, expert_loss, share_loss, total_loss, weighted_ce,
    LossWeights,
};
use crate::metrics::{compose_regions, dice_score, hd95, BinaryMask};
use crate::model::{Model, ModelConfig, Variant};
use crate::nn::SelfAttentionBlock;
use crate::params::ParamStore;
use crate::pfrf::{assemble_modal_features, drive_with_prototype, fuse_modalities, Assemble, Pdm, PfrfConfig};
use crate::tensor::Tensor;
use crate::training::{load_checkpoint, poly_lr, save_checkpoint, tta_infer, TrainConfig, TrainState, Trainer};

/// Relative error bound for analytic vs. numeric gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Absolute bound for gradients that vanish by construction.
pub const INERT_TOL: f64 = 1e-7;
/// Absolute bound for attention oracles.
pub const ATTENTION_TOL: f64 = 1e-6;
/// Bound for prototype, integration and metric oracles.
pub const EXACT_TOL: f64 = 1e-9;
/// Bound on per-voxel probability sums.
pub const SUM_TOL: f64 = 1e-5;
/// Operations that accept an injected gradient fault.
pub const FAULTS: [&str; 1] = ["cross_attend"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradients,
    Oracles,
    Metrics,
    Normalization,
    Shapes,
    Determinism,
    Losses,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Gradients,
        Suite::Oracles,
        Suite::Metrics,
        Suite::Normalization,
        Suite::Shapes,
        Suite::Determinism,
        Suite::Losses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Oracles => "oracles",
            Suite::Metrics => "metrics",
            Suite::Normalization => "normalization",
            Suite::Shapes => "shapes",
            Suite::Determinism => "determinism",
            Suite::Losses => "losses",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}/{}: {}", self.suite, self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub suites: Vec<Suite>,
    /// Operation whose backward rule is sabotaged, see [`FAULTS`].
    pub fault: Option<String>,
    /// Random instances per oracle.
    pub instances: usize,
    /// Random model configurations for the normalisation suite.
    pub configs: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            suites: Suite::ALL.to_vec(),
            fault: None,
            instances: 100,
            configs: 20,
            seed: 0,
        }
    }
}

pub fn run(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    if let Some(f) = &opts.fault {
        if !FAULTS.contains(&f.as_str()) {
            return Err(Error::Config(format!("unknown fault {f:?}; known: {FAULTS:?}")));
        }
    }
    let mut out = Vec::new();
    for &suite in &opts.suites {
        let checks = match suite {
            Suite::Gradients => gradient_suite(opts),
            Suite::Oracles => oracle_suite(opts),
            Suite::Metrics => metric_suite(opts),
            Suite::Normalization => normalization_suite(opts),
            Suite::Shapes => vec![],
            Suite::Determinism => determinism_suite(opts),
            Suite::Losses => loss_suite(),
        };
        let checks = if suite == Suite::Shapes { shape_suite() } else { checks };
        out.extend(checks);
    }
    Ok(out)
}

fn check(suite: Suite, name: &str, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        suite,
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

fn failed(suite: Suite, name: &str, e: Error) -> CheckResult {
    check(suite, name, false, format!("{}: {e}", e.code()))
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Overwrites every parameter with Gaussian noise so that biases and
/// affine terms are exercised too.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = gaussian(rng, &shape, scale);
    }
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = gaussian(&mut rng, g.shape(y), 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r);
    g.sum(p)
}

fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], all_classes: bool) -> LabelMap {
    let n: usize = dims.iter().product();
    let mut data: Vec<u8> = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES as u8)).collect();
    if all_classes {
        for (k, v) in data.iter_mut().take(NUM_CLASSES).enumerate() {
            *v = k as u8;
        }
    }
    LabelMap { dims, data }
}

// ---------------------------------------------------------------- gradients

struct GradFixture {
    name: &'static str,
    store: ParamStore,
    /// Tensors whose gradient vanishes by construction (a bias followed by
    /// instance norm); held to an absolute bound instead.
    inert: Vec<String>,
    build: Box<dyn Fn(&mut Graph, &ParamStore) -> Var>,
}

fn grad_fixtures(seed: u64) -> Vec<GradFixture> {
    let mut fx = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctp_cfg = CtpConfig {
        token_width: 4,
        heads: 2,
        dropout: 0.0,
        masked_average: false,
    };

    for (name, stride) in [("encoder_block", 1), ("encoder_block_downsample", 2)] {
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, &mut rng, "block", 2, 3, stride, 0.01);
        randomize(&mut store, &mut rng, 0.5);
        let x = store.register("x", gaussian(&mut rng, &[2, 4, 4, 4], 1.0));
        let inert = ["unit1", "unit2"].map(|u| format!("block.{u}.conv.bias")).to_vec();
        fx.push(GradFixture {
            name,
            store,
            inert,
            build: Box::new(move |g, s| {
                let x = g.param(s, x);
                let y = block.forward(g, s, x);
                project(g, y, 1)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let layer = SelfAttend::new(&mut store, &mut rng, "sa", 3, &ctp_cfg).expect("valid config");
        randomize(&mut store, &mut rng, 0.5);
        let x = store.register("x", gaussian(&mut rng, &[3, 2, 2, 2], 1.0));
        fx.push(GradFixture {
            name: "self_attend",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let x = g.param(s, x);
                let t = self_attend(g, s, x, &layer).expect("fixture shapes");
                project(g, t.output, 2)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let layer = CrossAttend::new(&mut store, &mut rng, "ca", &ctp_cfg).expect("valid config");
        randomize(&mut store, &mut rng, 0.5);
        let a = store.register("current", gaussian(&mut rng, &[8, 4], 1.0));
        let b = store.register("other", gaussian(&mut rng, &[8, 4], 1.0));
        fx.push(GradFixture {
            name: "cross_attend",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let a = g.param(s, a);
                let b = g.param(s, b);
                let t = cross_attend(g, s, a, b, &layer).expect("fixture shapes");
                project(g, t.output, 3)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let head = RegionHead::new(&mut store, &mut rng, "pfg", &ctp_cfg);
        randomize(&mut store, &mut rng, 0.5);
        let t = store.register("tokens", gaussian(&mut rng, &[8, 4], 1.0));
        fx.push(GradFixture {
            name: "generate_region_maps",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let t = g.param(s, t);
                let m = generate_region_maps(g, s, t, [2, 2, 2], &head).expect("fixture shapes");
                let a = project(g, m.probs, 4);
                let b = project(g, m.features, 5);
                g.add(a, b)
            }),
        });
    }

    for (name, masked) in [("compute_prototype", false), ("compute_prototype_masked", true)] {
        let mut store = ParamStore::new();
        let f = store.register("features", gaussian(&mut rng, &[3, 2, 2, 2], 1.0));
        let l = store.register("logits", gaussian(&mut rng, &[4, 2, 2, 2], 1.0));
        fx.push(GradFixture {
            name,
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let f = g.param(s, f);
                let l = g.param(s, l);
                let p = g.softmax(l, 0);
                let p = g.slice(p, 0, 1, 1);
                let v = compute_prototype(g, f, p, masked).expect("fixture shapes");
                project(g, v, 6)
            }),
        });
    }

    for (name, single) in [("drive_with_prototype", false), ("drive_with_prototype_single", true)] {
        let cfg = PfrfConfig {
            token_width: 4,
            modal_width: 2,
            heads: 2,
            single_channel_activation: single,
            fusion_residual: true,
        };
        let mut store = ParamStore::new();
        let pdm = Pdm::new(&mut store, &mut rng, "pdm", &cfg);
        randomize(&mut store, &mut rng, 0.5);
        let f = store.register("features", gaussian(&mut rng, &[4, 2, 2, 2], 1.0));
        let p = store.register("prototype", gaussian(&mut rng, &[4], 1.0));
        fx.push(GradFixture {
            name,
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let f = g.param(s, f);
                let p = g.param(s, p);
                let (a, h) = drive_with_prototype(g, s, f, p, &pdm).expect("fixture shapes");
                let x = project(g, a, 7);
                let y = project(g, h, 8);
                g.add(x, y)
            }),
        });
    }

    {
        let cfg = PfrfConfig {
            token_width: 2,
            modal_width: 3,
            heads: 2,
            single_channel_activation: false,
            fusion_residual: true,
        };
        let mut store = ParamStore::new();
        let asm = Assemble::new(&mut store, &mut rng, "asm", &cfg);
        randomize(&mut store, &mut rng, 0.5);
        let hs: Vec<_> = (0..3)
            .map(|i| store.register(format!("h{i}"), gaussian(&mut rng, &[2, 2, 2, 2], 1.0)))
            .collect();
        fx.push(GradFixture {
            name: "assemble_modal_features",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let hs: Vec<Var> = hs.iter().map(|&h| g.param(s, h)).collect();
                let y = assemble_modal_features(g, s, &hs, &asm).expect("fixture shapes");
                project(g, y, 9)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let block = SelfAttentionBlock::new(&mut store, &mut rng, "fuse", 8, 2, true);
        randomize(&mut store, &mut rng, 0.5);
        let ms: Vec<_> = (0..4)
            .map(|i| store.register(format!("modal{i}"), gaussian(&mut rng, &[2, 2, 2, 2], 1.0)))
            .collect();
        fx.push(GradFixture {
            name: "fuse_modalities",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let ms: Vec<Var> = ms.iter().map(|&m| g.param(s, m)).collect();
                let (y, _) = fuse_modalities(g, s, &ms, &block).expect("fixture shapes");
                project(g, y, 10)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let head = ExpertHead::new(&mut store, &mut rng, "expert", 1, 2).expect("level 1");
        randomize(&mut store, &mut rng, 0.5);
        let f = store.register("features", gaussian(&mut rng, &[2, 4, 4, 4], 1.0));
        fx.push(GradFixture {
            name: "expert_head",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let f = g.param(s, f);
                let p = expert_region_maps(g, s, f, &head).expect("fixture shapes");
                let y = integrate_expert_features(g, s, f, p, &head).expect("fixture shapes");
                let a = project(g, p, 11);
                let b = project(g, y, 12);
                g.add(a, b)
            }),
        });
    }

    let labels = random_labels(&mut rng, [4, 4, 4], true);
    let truth = labels.one_hot();
    let fixed = LossWeights {
        class_weights: [0.5, 1.0, 2.0, 1.5],
        ..LossWeights::default()
    };
    let adaptive = LossWeights {
        inverse_frequency: true,
        ..LossWeights::default()
    }
    .resolve(&labels);
    let loss_fields = |store: &mut ParamStore, rng: &mut ChaCha8Rng, dims: &[[usize; 3]]| {
        dims.iter()
            .enumerate()
            .map(|(i, d)| store.register(format!("logits{i}"), gaussian(rng, &[4, d[0], d[1], d[2]], 1.0)))
            .collect::<Vec<_>>()
    };
    type LossFn = fn(&mut Graph, Var, &Tensor, &LossWeights) -> Result<Var>;
    let simple: [(&'static str, LossFn, &LossWeights); 4] = [
        ("dice_loss", dice_loss, &fixed),
        ("weighted_ce", weighted_ce, &fixed),
        ("combined_loss", combined_loss, &fixed),
        ("combined_loss_inverse_frequency", combined_loss, &adaptive),
    ];
    for (name, f, w) in simple {
        let mut store = ParamStore::new();
        let ids = loss_fields(&mut store, &mut rng, &[[4, 4, 4]]);
        let (truth, w) = (truth.clone(), w.clone());
        fx.push(GradFixture {
            name,
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let l = g.param(s, ids[0]);
                let p = g.softmax(l, 0);
                f(g, p, &truth, &w).expect("fixture shapes")
            }),
        });
    }

    let softmaxed = |g: &mut Graph, s: &ParamStore, ids: &[crate::params::ParamId]| -> Vec<Var> {
        ids.iter()
            .map(|&id| {
                let l = g.param(s, id);
                g.softmax(l, 0)
            })
            .collect()
    };
    {
        let mut store = ParamStore::new();
        let ids = loss_fields(&mut store, &mut rng, &[[2, 2, 2]; 4]);
        let (truth, w) = (truth.clone(), fixed.clone());
        fx.push(GradFixture {
            name: "ctp_loss",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let ps = softmaxed(g, s, &ids);
                ctp_loss(g, &ps, &truth, &w).expect("fixture shapes")
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let ids = loss_fields(&mut store, &mut rng, &[[4, 4, 4]; 5]);
        let (truth, w) = (truth.clone(), fixed.clone());
        fx.push(GradFixture {
            name: "share_loss",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let ps = softmaxed(g, s, &ids);
                share_loss(g, &ps, &truth, &w).expect("fixture shapes")
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let ids = loss_fields(&mut store, &mut rng, &[[4, 4, 4], [2, 2, 2], [2, 2, 2], [1, 1, 1]]);
        let (labels, w) = (labels.clone(), fixed.clone());
        fx.push(GradFixture {
            name: "expert_loss",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let ps = softmaxed(g, s, &ids);
                expert_loss(g, &ps, &labels, &w).expect("fixture shapes")
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let ids = loss_fields(&mut store, &mut rng, &[[1, 1, 1], [1, 1, 1], [2, 2, 2], [2, 2, 2], [4, 4, 4]]);
        let (truth, w) = (truth.clone(), fixed.clone());
        fx.push(GradFixture {
            name: "deep_supervision_loss",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let ps = softmaxed(g, s, &ids);
                deep_supervision_loss(g, &ps, &truth, &w).expect("fixture shapes")
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let ids = loss_fields(&mut store, &mut rng, &[[2, 2, 2], [4, 4, 4], [2, 2, 2], [4, 4, 4]]);
        let (truth, labels, w) = (truth.clone(), labels.clone(), fixed.clone());
        fx.push(GradFixture {
            name: "total_loss",
            store,
            inert: vec![],
            build: Box::new(move |g, s| {
                let ps = softmaxed(g, s, &ids);
                let a = ctp_loss(g, &[ps[0]; 4], &truth, &w).expect("fixture shapes");
                let b = share_loss(g, &[ps[1]; 5], &truth, &w).expect("fixture shapes");
                let c = expert_loss(g, &[ps[1], ps[2], ps[2], ps[2]], &labels, &w).expect("fixture shapes");
                let d = deep_supervision_loss(g, &[ps[2], ps[2], ps[2], ps[3], ps[3]], &truth, &w)
                    .expect("fixture shapes");
                total_loss(g, &[a, b, c, d]).expect("four components")
            }),
        });
    }
    fx
}

fn gradient_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let gopts = GradCheckOptions {
        step: 1e-5,
        max_coords: Some(16),
        seed: opts.seed,
    };
    grad_fixtures(opts.seed)
        .into_iter()
        .map(|fx| {
            let fault = opts.fault.clone();
            let build = &fx.build;
            let report = gradcheck::check(&fx.store, &[], &gopts, |g, s| {
                if let Some(f) = &fault {
                    g.inject_fault(f);
                }
                build(g, s)
            });
            let (inert, live): (Vec<_>, Vec<_>) = report.tensors.iter().partition(|t| fx.inert.contains(&t.name));
            let worst = live.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
            let inert_abs = inert.iter().map(|t| t.max_abs_error).fold(0.0, f64::max);
            let passed = worst.map_or(true, |t| t.rel_error < GRAD_TOL) && inert_abs <= INERT_TOL;
            let mut detail = format!(
                "{} tensors, worst relative error {}",
                live.len(),
                worst.map(|t| format!("{:.3e} ({})", t.rel_error, t.name)).unwrap_or_default()
            );
            if !inert.is_empty() {
                detail += &format!("; {} inert tensors, max |gradient error| {inert_abs:.3e}", inert.len());
            }
            check(Suite::Gradients, fx.name, passed, detail)
        })
        .collect()
}

// ----------------------------------------------------------- brute force

type Rows = Vec<Vec<f64>>;

/// Tokens `[n][c]` of a channel-major map.
fn bf_tokens(map: &Tensor) -> Rows {
    let (c, n) = (map.channels(), map.voxels());
    (0..n).map(|i| (0..c).map(|k| map.data()[k * n + i]).collect()).collect()
}

fn bf_rows(t: &Tensor) -> Rows {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn bf_matmul(x: &Rows, w: &Tensor, bias: Option<&Tensor>) -> Rows {
    let (k, m) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..m)
                .map(|j| {
                    let mut acc = bias.map_or(0.0, |b| b.data()[j]);
                    for i in 0..k {
                        acc += row[i] * w.data()[i * m + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn bf_layer_norm(x: &Rows, gamma: &Tensor, beta: &Tensor) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gamma.data()[j] + beta.data()[j])
                .collect()
        })
        .collect()
}

fn bf_attention(q_in: &Rows, kv_in: &Rows, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, heads: usize) -> Rows {
    let q = bf_matmul(q_in, wq, None);
    let k = bf_matmul(kv_in, wk, None);
    let v = bf_matmul(kv_in, wv, None);
    let width = wq.shape()[1];
    let d = width / heads;
    let mut joined = vec![vec![0.0; width]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| (0..d).map(|t| qi[h * d + t] * kj[h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                joined[i][h * d + t] = e.iter().zip(&v).map(|(a, vj)| a / z * vj[h * d + t]).sum();
            }
        }
    }
    bf_matmul(&joined, wo, None)
}

fn bf_add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn rows_diff(a: &Rows, t: &Tensor) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    if flat.len() != t.len() {
        return f64::INFINITY;
    }
    flat.iter().zip(t.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct-loop "same" convolution, stride 1.
fn bf_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [h, wd, d] = x.spatial();
    let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let p = (k / 2) as isize;
    Tensor::from_fn(&[cout, h, wd, d], |idx| {
        let co = idx / (h * wd * d);
        let r = idx % (h * wd * d);
        let (i, j, l) = (r / (wd * d), (r / d) % wd, r % d);
        let mut acc = b.data()[co];
        for ci in 0..cin {
            for a in 0..k {
                for bb in 0..k {
                    for c in 0..k {
                        let (ii, jj, ll) =
                            (i as isize + a as isize - p, j as isize + bb as isize - p, l as isize + c as isize - p);
                        if ii < 0 || jj < 0 || ll < 0 || ii >= h as isize || jj >= wd as isize || ll >= d as isize {
                            continue;
                        }
                        let xv = x.data()[((ci * h + ii as usize) * wd + jj as usize) * d + ll as usize];
                        acc += xv * w.data()[(((co * cin + ci) * k + a) * k + bb) * k + c];
                    }
                }
            }
        }
        acc
    })
}

// ------------------------------------------------------------- oracles

fn random_width_heads(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let heads = rng.gen_range(1..=3);
    (heads * rng.gen_range(1..=3), heads)
}

fn random_small_dims(rng: &mut ChaCha8Rng) -> [usize; 3] {
    loop {
        let d = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2)];
        if d.iter().product::<usize>() <= 8 {
            return d;
        }
    }
}

fn oracle_result(name: &str, instances: usize, worst: f64, tol: f64, err: Option<Error>) -> CheckResult {
    match err {
        Some(e) => failed(Suite::Oracles, name, e),
        None => check(
            Suite::Oracles,
            name,
            worst <= tol,
            format!("{instances} instances, max deviation {worst:.3e} (tolerance {tol:.0e})"),
        ),
    }
}

fn oracle_self_attend(rng: &mut ChaCha8Rng, n: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (width, heads) = random_width_heads(rng);
        let cin = rng.gen_range(1..=4);
        let dims = random_small_dims(rng);
        let cfg = CtpConfig {
            token_width: width,
            heads,
            dropout: 0.0,
            masked_average: false,
        };
        let mut store = ParamStore::new();
        let layer = match SelfAttend::new(&mut store, rng, "sa", cin, &cfg) {
            Ok(l) => l,
            Err(e) => return oracle_result("self_attend", n, worst, ATTENTION_TOL, Some(e)),
        };
        randomize(&mut store, rng, 0.7);
        let feat = gaussian(rng, &[cin, dims[0], dims[1], dims[2]], 1.0);
        let mut g = Graph::eval();
        let x = g.constant(feat.clone());
        let got = match self_attend(&mut g, &store, x, &layer) {
            Ok(t) => g.value(t.output).clone(),
            Err(e) => return oracle_result("self_attend", n, worst, ATTENTION_TOL, Some(e)),
        };
        let s = |id| store.get(id);
        let projected = bf_matmul(&bf_tokens(&feat), s(layer.project.weight), layer.project.bias.map(s));
        let normed = bf_layer_norm(&projected, s(layer.block.norm.gamma), s(layer.block.norm.beta));
        let a = &layer.block.attention;
        let att = bf_attention(&normed, &normed, s(a.query), s(a.key), s(a.value), s(a.output), heads);
        worst = worst.max(rows_diff(&bf_add(&projected, &att), &got));
    }
    oracle_result("self_attend", n, worst, ATTENTION_TOL, None)
}

fn oracle_cross_attend(rng: &mut ChaCha8Rng, n: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (width, heads) = random_width_heads(rng);
        let tokens = rng.gen_range(1..=8);
        let cfg = CtpConfig {
            token_width: width,
            heads,
            dropout: 0.0,
            masked_average: false,
        };
        let mut store = ParamStore::new();
        let layer = match CrossAttend::new(&mut store, rng, "ca", &cfg) {
            Ok(l) => l,
            Err(e) => return oracle_result("cross_attend", n, worst, ATTENTION_TOL, Some(e)),
        };
        randomize(&mut store, rng, 0.7);
        let cur = gaussian(rng, &[tokens, width], 1.0);
        let other = gaussian(rng, &[tokens, width], 1.0);
        let mut g = Graph::eval();
        let (a, b) = (g.constant(cur.clone()), g.constant(other.clone()));
        let got = match cross_attend(&mut g, &store, a, b, &layer) {
            Ok(t) => g.value(t.output).clone(),
            Err(e) => return oracle_result("cross_attend", n, worst, ATTENTION_TOL, Some(e)),
        };
        let s = |id| store.get(id);
        let q = bf_layer_norm(&bf_rows(&cur), s(layer.norm_current.gamma), s(layer.norm_current.beta));
        let kv = bf_layer_norm(&bf_rows(&other), s(layer.norm_other.gamma), s(layer.norm_other.beta));
        let at = &layer.attention;
        let want = bf_attention(&q, &kv, s(at.query), s(at.key), s(at.value), s(at.output), heads);
        worst = worst.max(rows_diff(&want, &got));
    }
    oracle_result("cross_attend", n, worst, ATTENTION_TOL, None)
}

fn oracle_fusion(rng: &mut ChaCha8Rng, n: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let modal = rng.gen_range(1..=3);
        let width = 4 * modal;
        let heads = [1, 2, 4].into_iter().filter(|h| width % h == 0).nth(rng.gen_range(0..3)).unwrap_or(1);
        let residual = rng.gen_bool(0.5);
        let dims = random_small_dims(rng);
        let mut store = ParamStore::new();
        let block = SelfAttentionBlock::new(&mut store, rng, "fuse", width, heads, residual);
        randomize(&mut store, rng, 0.7);
        let maps: Vec<Tensor> = (0..4).map(|_| gaussian(rng, &[modal, dims[0], dims[1], dims[2]], 1.0)).collect();
        let mut g = Graph::eval();
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let got = match fuse_modalities(&mut g, &store, &vars, &block) {
            Ok((y, _)) => g.value(y).clone(),
            Err(e) => return oracle_result("fuse_modalities", n, worst, ATTENTION_TOL, Some(e)),
        };
        // Token i concatenates the four modal channel vectors.
        let per: Vec<Rows> = maps.iter().map(bf_tokens).collect();
        let tokens: Rows = (0..per[0].len()).map(|i| per.iter().flat_map(|p| p[i].clone()).collect()).collect();
        let s = |id| store.get(id);
        let normed = bf_layer_norm(&tokens, s(block.norm.gamma), s(block.norm.beta));
        let a = &block.attention;
        let mut out = bf_attention(&normed, &normed, s(a.query), s(a.key), s(a.value), s(a.output), heads);
        if residual {
            out = bf_add(&tokens, &out);
        }
        // Back to channel-major.
        let nvox = out.len();
        let want: Rows = (0..width).map(|c| (0..nvox).map(|i| out[i][c]).collect()).collect();
        worst = worst.max(rows_diff(&want, &got));
    }
    oracle_result("fuse_modalities", n, worst, ATTENTION_TOL, None)
}

fn oracle_prototype(rng: &mut ChaCha8Rng, n: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let masked = i % 2 == 1;
        let c = rng.gen_range(1..=5);
        let dims = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
        let nv: usize = dims.iter().product();
        let feat = gaussian(rng, &[c, dims[0], dims[1], dims[2]], 1.0);
        let map = Tensor::from_fn(&[1, dims[0], dims[1], dims[2]], |_| rng.gen_range(0.0..1.0));
        let mut g = Graph::eval();
        let (f, m) = (g.constant(feat.clone()), g.constant(map.clone()));
        let got = match compute_prototype(&mut g, f, m, masked) {
            Ok(v) => g.value(v).clone(),
            Err(e) => return oracle_result("compute_prototype", n, worst, EXACT_TOL, Some(e)),
        };
        let mass: f64 = map.data().iter().sum();
        let denom = if masked { mass } else { nv as f64 };
        for k in 0..c {
            let mut acc = 0.0;
            for v in 0..nv {
                acc += feat.data()[k * nv + v] * map.data()[v];
            }
            let want = acc / denom;
            worst = worst.max((want - got.data()[k]).abs() / want.abs().max(1.0));
        }
    }
    oracle_result("compute_prototype", n, worst, EXACT_TOL, None)
}

fn oracle_integration(rng: &mut ChaCha8Rng, n: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let c = rng.gen_range(1..=3);
        let dims = [rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let nv: usize = dims.iter().product();
        let mut store = ParamStore::new();
        let head = match ExpertHead::new(&mut store, rng, "e", 1, c) {
            Ok(h) => h,
            Err(e) => return oracle_result("integrate_expert_features", n, worst, EXACT_TOL, Some(e)),
        };
        randomize(&mut store, rng, 0.5);
        let feat = gaussian(rng, &[c, dims[0], dims[1], dims[2]], 1.0);
        let mut g = Graph::eval();
        let f = g.constant(feat.clone());
        let got = expert_region_maps(&mut g, &store, f, &head)
            .and_then(|p| integrate_expert_features(&mut g, &store, f, p, &head));
        let got = match got {
            Ok(y) => g.value(y).clone(),
            Err(e) => return oracle_result("integrate_expert_features", n, worst, EXACT_TOL, Some(e)),
        };
        let s = |id| store.get(id);
        let logits = bf_conv(&feat, s(head.classifier.weight), s(head.classifier.bias));
        let mut probs = vec![0.0; NUM_CLASSES * nv];
        for v in 0..nv {
            let l: Vec<f64> = (0..NUM_CLASSES).map(|k| logits.data()[k * nv + v]).collect();
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|x| (x - mx).exp()).sum();
            for k in 0..NUM_CLASSES {
                probs[k * nv + v] = (l[k] - mx).exp() / z;
            }
        }
        // Tumour classes 1..3 mask the features, concatenated in that order.
        let masked = Tensor::from_fn(&[3 * c, dims[0], dims[1], dims[2]], |i| {
            let (ch, v) = (i / nv, i % nv);
            let (r, k) = (ch / c, ch % c);
            feat.data()[k * nv + v] * probs[(r + 1) * nv + v]
        });
        let mid = bf_conv(&masked, s(head.integrate.weight), s(head.integrate.bias));
        let want = bf_conv(&mid, s(head.restore.weight), s(head.restore.bias));
        let dev = want
            .data()
            .iter()
            .zip(got.data())
            .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);
        worst = worst.max(dev);
    }
    oracle_result("integrate_expert_features", n, worst, EXACT_TOL, None)
}

fn oracle_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0a11_ce);
    let n = opts.instances;
    vec![
        oracle_self_attend(&mut rng, n),
        oracle_cross_attend(&mut rng, n),
        oracle_fusion(&mut rng, n),
        oracle_prototype(&mut rng, n),
        oracle_integration(&mut rng, n),
    ]
}

// ------------------------------------------------------------- metrics

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> BinaryMask {
    let n: usize = dims.iter().product();
    let density = [0.0, 0.05, 0.3, 0.6, 1.0][rng.gen_range(0..5)];
    let data = (0..n).map(|_| rng.gen_bool(density)).collect();
    BinaryMask::new(dims, data, spacing).expect("consistent mask")
}

fn bf_surface(m: &BinaryMask) -> Vec<[usize; 3]> {
    let [h, w, d] = m.dims;
    let at = |i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < h
            && (j as usize) < w
            && (k as usize) < d
            && m.data[(i as usize * w + j as usize) * d + k as usize]
    };
    let mut out = Vec::new();
    for i in 0..h as isize {
        for j in 0..w as isize {
            for k in 0..d as isize {
                if !at(i, j, k) {
                    continue;
                }
                let nb = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if nb.iter().any(|(a, b, c)| !at(i + a, j + b, k + c)) {
                    out.push([i as usize, j as usize, k as usize]);
                }
            }
        }
    }
    out
}

fn bf_hd95(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (sa, sb) = (bf_surface(a), bf_surface(b));
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    if sa.is_empty() || sb.is_empty() {
        let s = a.spacing;
        return (0..3).map(|i| ((a.dims[i] - 1) as f64 * s[i]).powi(2)).sum::<f64>().sqrt();
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|i| ((p[i] as f64 - q[i] as f64) * a.spacing[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut all = Vec::new();
    for (from, to) in [(&sa, &sb), (&sb, &sa)] {
        for p in from {
            all.push(to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
    }
    all.sort_by(|x, y| x.total_cmp(y));
    let rank = 0.95 * (all.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < all.len() {
        all[lo] * (1.0 - frac) + all[lo + 1] * frac
    } else {
        all[lo]
    }
}

fn metric_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x00d1_ce);
    let n = opts.instances;
    let mut dice_worst: f64 = 0.0;
    let mut hd_worst: f64 = 0.0;
    let mut region_ok = true;
    let mut err = None;
    for _ in 0..n {
        let dims = if rng.gen_bool(0.5) {
            [8; 3]
        } else {
            [rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8)]
        };
        let spacing = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
        let a = random_mask(&mut rng, dims, spacing);
        let b = random_mask(&mut rng, dims, spacing);

        let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in 0..a.data.len() {
            if a.data[i] {
                na += 1.0;
            }
            if b.data[i] {
                nb += 1.0;
            }
            if a.data[i] && b.data[i] {
                inter += 1.0;
            }
        }
        let want = if na + nb == 0.0 { 1.0 } else { 2.0 * inter / (na + nb) };
        match (dice_score(&a, &b), hd95(&a, &b, None)) {
            (Ok(d), Ok(h)) => {
                dice_worst = dice_worst.max((d - want).abs());
                hd_worst = hd_worst.max((h - bf_hd95(&a, &b)).abs());
            }
            (Err(e), _) | (_, Err(e)) => {
                err = Some(e);
                break;
            }
        }

        let labels = random_labels(&mut rng, dims, false);
        match compose_regions(&labels, spacing) {
            Ok([wt, tc, et]) => {
                for (v, &c) in labels.data.iter().enumerate() {
                    region_ok &= wt.data[v] == (c != 0) && tc.data[v] == (c == 1 || c == 3) && et.data[v] == (c == 3);
                }
            }
            Err(e) => {
                err = Some(e);
                break;
            }
        }
    }
    if let Some(e) = err {
        return vec![failed(Suite::Metrics, "metric_oracles", e)];
    }
    vec![
        check(
            Suite::Metrics,
            "dice_score",
            dice_worst <= EXACT_TOL,
            format!("{n} instances, max deviation {dice_worst:.3e}"),
        ),
        check(
            Suite::Metrics,
            "hd95",
            hd_worst <= EXACT_TOL,
            format!("{n} instances, max deviation {hd_worst:.3e}"),
        ),
        check(
            Suite::Metrics,
            "compose_regions",
            region_ok,
            format!("{n} label maps against WT = 1|2|3, TC = 1|3, ET = 3"),
        ),
    ]
}

// -------------------------------------------------------- normalisation

fn max_sum_error(t: &Tensor) -> f64 {
    let (c, n) = (t.channels(), t.voxels());
    (0..n)
        .map(|v| ((0..c).map(|k| t.data()[k * n + v]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn random_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let base = rng.gen_range(1..=2);
    let c5 = base * 16;
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    ModelConfig {
        base_channels: base,
        variant: if rng.gen_bool(0.8) { Variant::Full } else { Variant::Baseline },
        token_width: [0, 4, 8][rng.gen_range(0..3)].min(c5),
        heads,
        dropout: rng.gen_range(0.0..0.3),
        masked_average_prototype: rng.gen_bool(0.5),
        single_channel_activation: rng.gen_bool(0.5),
        fusion_residual: rng.gen_bool(0.5),
        init_seed: rng.gen(),
        ..ModelConfig::default()
    }
}

fn normalization_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5u64);
    let mut sum_worst: f64 = 0.0;
    let mut act_min = f64::INFINITY;
    let mut fields = 0usize;
    let mut maps = 0usize;
    for _ in 0..opts.configs {
        let cfg = random_model_config(&mut rng);
        let result = (|| -> Result<()> {
            let model = Model::new(&cfg)?;
            let input = gaussian(&mut rng, &[4, 16, 16, 16], 1.0);
            let mut g = Graph::train(rng.gen());
            let x = g.constant(input.clone());
            let out = model.forward(&mut g, x, true)?;
            let mut probs: Vec<Var> = vec![out.output];
            probs.extend(&out.seg_blocks);
            probs.extend(&out.share);
            if let Some(c) = &out.ctp {
                probs.extend(c.maps.iter().map(|m| m.probs));
            }
            if let Some(k) = &out.kiimi {
                probs.extend(&k.maps);
            }
            for p in probs {
                sum_worst = sum_worst.max(max_sum_error(g.value(p)));
                fields += 1;
            }
            if let Some(p) = &out.pfrf {
                for a in p.activations.iter().flatten() {
                    act_min = act_min.min(g.value(*a).data().iter().cloned().fold(f64::INFINITY, f64::min));
                    maps += 1;
                }
            }
            let tta = tta_infer(&model, &input, true)?;
            sum_worst = sum_worst.max(max_sum_error(&tta));
            fields += 1;
            Ok(())
        })();
        if let Err(e) = result {
            return vec![failed(Suite::Normalization, "probability_fields", e)];
        }
    }
    vec![
        check(
            Suite::Normalization,
            "probability_fields",
            sum_worst <= SUM_TOL,
            format!(
                "{} configs, {fields} fields (region maps, expert maps, decoder heads, TTA), max |sum - 1| {sum_worst:.3e}",
                opts.configs
            ),
        ),
        check(
            Suite::Normalization,
            "activation_maps",
            maps > 0 && act_min >= 0.0,
            format!("{maps} activation maps, minimum value {act_min:.3e}"),
        ),
    ]
}

// ---------------------------------------------------------------- shapes

/// Shape contract of one full forward at 32³ with base width 4.
pub fn shape_suite() -> Vec<CheckResult> {
    let cfg = ModelConfig::default();
    let mut checks = Vec::new();
    let mut push = |name: &str, ok: bool, detail: String| checks.push(check(Suite::Shapes, name, ok, detail));
    let result = (|| -> Result<()> {
        let model = Model::new(&cfg)?;
        let n = 32;
        let mut g = Graph::eval();
        let x = g.constant(Tensor::from_fn(&[4, n, n, n], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0));
        let out = model.forward(&mut g, x, true)?;
        let bb = cfg.backbone();
        let side = |l: usize| n >> (l - 1);
        let ladder = |l: usize, c: usize| vec![c, side(l), side(l), side(l)];

        let mut ok = out.modal_levels.len() == 4;
        let mut seen = Vec::new();
        for enc in out.modal_levels.iter().chain(out.extra_levels.iter()) {
            for l in 1..=NUM_LEVELS {
                let s = g.shape(enc.level(l)).to_vec();
                ok &= s == ladder(l, bb.channels(l));
                if seen.len() < NUM_LEVELS {
                    seen.push(s);
                }
            }
        }
        push("encoder_ladder", ok && out.extra_levels.is_some(), format!("5 encoders, levels {seen:?}"));

        let ctp = out.ctp.as_ref().expect("full variant");
        let width = cfg.resolved_token_width();
        let protos: Vec<Vec<usize>> = ctp.prototypes.iter().flatten().map(|&p| g.shape(p).to_vec()).collect();
        push(
            "prototypes",
            protos.len() == 12 && protos.iter().all(|s| s == &[width]),
            format!("{} prototypes of shape {:?}", protos.len(), protos.first()),
        );

        let kiimi = out.kiimi.as_ref().expect("full variant");
        let experts: Vec<Vec<usize>> = kiimi.maps.iter().map(|&m| g.shape(m).to_vec()).collect();
        let ok = experts.len() == EXPERT_LEVELS
            && experts.iter().enumerate().all(|(i, s)| s == &ladder(i + 1, NUM_CLASSES));
        push("expert_maps", ok, format!("{experts:?}"));

        let blocks: Vec<Vec<usize>> = out.seg_blocks.iter().map(|&b| g.shape(b).to_vec()).collect();
        let ok = blocks.len() == NUM_LEVELS
            && blocks.iter().enumerate().all(|(i, s)| s == &ladder(i + 1, NUM_CLASSES));
        push("deep_supervision_fields", ok, format!("{blocks:?}"));

        let fused = g.shape(out.pfrf.as_ref().expect("full variant").fused).to_vec();
        push(
            "fused_bottleneck",
            fused == ladder(NUM_LEVELS, 4 * bb.channels(NUM_LEVELS)),
            format!("{fused:?}"),
        );

        let share: Vec<Vec<usize>> = out.share.iter().map(|&s| g.shape(s).to_vec()).collect();
        push(
            "shared_decoder",
            share.len() == 5 && share.iter().all(|s| s == &ladder(1, NUM_CLASSES)),
            format!("{} branches of {:?}", share.len(), share.first()),
        );

        let o = g.shape(out.output).to_vec();
        push("output", o == ladder(1, NUM_CLASSES), format!("{o:?}"));
        Ok(())
    })();
    if let Err(e) = result {
        checks.push(failed(Suite::Shapes, "forward", e));
    }
    checks
}

// ----------------------------------------------------------- determinism

fn small_experiment() -> (ModelConfig, TrainConfig, PhantomConfig) {
    let model = ModelConfig {
        base_channels: 2,
        heads: 2,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        crop: [16; 3],
        total_epochs: 4,
        base_lr: 1e-3,
        ..TrainConfig::default()
    };
    let phantom = PhantomConfig {
        count: 2,
        grid_size: [20; 3],
        ..PhantomConfig::default()
    };
    (model, train, phantom)
}

/// Totals of `steps` training steps from a fresh state.
pub fn loss_trajectory(
    model: &ModelConfig,
    train: &TrainConfig,
    cases: &[crate::data::MultiModalCase],
    state: Option<TrainState>,
    steps: u64,
) -> Result<(Vec<f64>, TrainState)> {
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(model, train)?,
    };
    let w = LossWeights::default();
    let trainer = Trainer {
        cfg: train,
        weights: &w,
        cases,
    };
    let mut totals = Vec::new();
    trainer.run(&mut state, steps, |_, r| {
        totals.push(r.loss.total);
        Ok(())
    })?;
    Ok((totals, state))
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn determinism_suite(_opts: &VerifyOptions) -> Vec<CheckResult> {
    let (model, train, phantom) = small_experiment();
    let mut out = Vec::new();
    let result = (|| -> Result<()> {
        let a = phantom.generate()?;
        let b = phantom.generate()?;
        out.push(check(
            Suite::Determinism,
            "phantom_dataset",
            a == b,
            format!("{} cases generated twice", a.len()),
        ));
        let cases = a.iter().map(normalize_case).collect::<Result<Vec<_>>>()?;
        let (r1, _) = loss_trajectory(&model, &train, &cases, None, 5)?;
        let (r2, _) = loss_trajectory(&model, &train, &cases, None, 5)?;
        let gap = max_gap(&r1, &r2);
        out.push(check(
            Suite::Determinism,
            "train_losses",
            gap <= 1e-6,
            format!("5 steps twice, max gap {gap:.3e}"),
        ));

        let dir = tempfile::tempdir()?;
        let path = dir.path().join("resume.ckpt");
        let (head, state) = loss_trajectory(&model, &train, &cases, None, 3)?;
        save_checkpoint(&path, &state)?;
        let restored = load_checkpoint(&path, Some(&model))?;
        let (tail, _) = loss_trajectory(&model, &train, &cases, Some(restored), 2)?;
        let resumed: Vec<f64> = head.into_iter().chain(tail).collect();
        let gap = max_gap(&resumed, &r1);
        out.push(check(
            Suite::Determinism,
            "checkpoint_resume",
            gap <= 1e-6,
            format!("3 + 2 steps across a checkpoint vs 5 uninterrupted, max gap {gap:.3e}"),
        ));
        Ok(())
    })();
    if let Err(e) = result {
        out.push(failed(Suite::Determinism, "run", e));
    }
    out
}

// ----------------------------------------------------------------- losses

/// Total objective when every supervised field equals the one-hot truth.
pub fn perfect_prediction_loss(labels: &LabelMap, w: &LossWeights) -> Result<f64> {
    let truth = labels.one_hot();
    let mut g = Graph::eval();
    let p = g.constant(truth.clone());
    let a = ctp_loss(&mut g, &[p; 4], &truth, w)?;
    let b = share_loss(&mut g, &[p; 5], &truth, w)?;
    let c = expert_loss(&mut g, &[p; EXPERT_LEVELS], labels, w)?;
    let d = deep_supervision_loss(&mut g, &[p; NUM_LEVELS], &truth, w)?;
    let t = total_loss(&mut g, &[a, b, c, d])?;
    Ok(g.value(t).item())
}

fn loss_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels = random_labels(&mut rng, [6, 6, 6], true);
    match perfect_prediction_loss(&labels, &w) {
        Ok(v) => out.push(check(
            Suite::Losses,
            "perfect_prediction",
            v <= 10.0 * w.epsilon,
            format!("total {v:.3e} (bound {:.1e})", 10.0 * w.epsilon),
        )),
        Err(e) => out.push(failed(Suite::Losses, "perfect_prediction", e)),
    }
    let cfg = TrainConfig::default();
    let (start, end) = (poly_lr(0, &cfg), poly_lr(cfg.total_epochs, &cfg));
    let mono = (1..=cfg.total_epochs).all(|e| match (poly_lr(e - 1, &cfg), poly_lr(e, &cfg)) {
        (Ok(a), Ok(b)) => b < a,
        _ => false,
    });
    let ok = matches!((&start, &end), (Ok(s), Ok(e)) if *s == 2e-4 && *e == 0.0) && mono;
    out.push(check(
        Suite::Losses,
        "poly_lr",
        ok,
        format!("lr(0) = {start:?}, lr(total) = {end:?}, strictly decreasing: {mono}"),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn unknown_fault_is_rejected() {
        let opts = VerifyOptions {
            fault: Some("matmul".into()),
            ..Default::default()
        };
        assert!(matches!(run(&opts), Err(Error::Config(_))));
    }

    #[test]
    fn brute_force_hd95_of_shifted_cube() {
        let dims = [6, 6, 6];
        let cube = |o: usize| {
            let mut d = vec![false; 216];
            for i in o..o + 2 {
                for j in 1..3 {
                    for k in 1..3 {
                        d[(i * 6 + j) * 6 + k] = true;
                    }
                }
            }
            BinaryMask::new(dims, d, [1.0; 3]).unwrap()
        };
        assert_eq!(bf_hd95(&cube(1), &cube(2)), 1.0);
        assert_eq!(bf_hd95(&cube(1), &cube(1)), 0.0);
    }
}
