//! Training-path checks on a narrow model: gradient reach, update effects
//! and inference consistency.

use std::collections::BTreeMap;

use protoseg::autograd::Graph;
use protoseg::config::PhantomConfig;
use protoseg::data::{normalize_case, MultiModalCase};
use protoseg::losses::LossWeights;
use protoseg::model::{Model, ModelConfig, Variant};
use protoseg::training::{sliding_window, train_step, tta_infer, TrainConfig, TrainState};

fn narrow(variant: Variant) -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        heads: 2,
        variant,
        ..ModelConfig::default()
    }
}

fn case(size: usize) -> MultiModalCase {
    let cfg = PhantomConfig {
        count: 1,
        seed: 21,
        grid_size: [size; 3],
        ..PhantomConfig::default()
    };
    normalize_case(&cfg.generate().unwrap()[0]).unwrap()
}

/// Parameter name up to its second dot, e.g. `enc.t1` or `pfrf.pdm`.
fn group(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

/// Gradient norm per parameter group after one loss evaluation.
fn group_norms(model: &Model, c: &MultiModalCase) -> BTreeMap<String, f64> {
    let mut g = Graph::train(3);
    let x = g.constant(c.to_tensor());
    let out = model.forward(&mut g, x, true).unwrap();
    let loss = model.loss(&mut g, &out, c.labels.as_ref().unwrap(), &LossWeights::default()).unwrap();
    let grads = g.backward(loss.total);
    let mut norms = BTreeMap::new();
    for (id, name, _) in model.store.iter() {
        let sq = grads
            .param(id)
            .map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>());
        *norms.entry(group(name)).or_insert(0.0) += sq;
    }
    norms
}

#[test]
fn every_parameter_group_receives_gradient() {
    for variant in [Variant::Full, Variant::Baseline] {
        let model = Model::new(&narrow(variant)).unwrap();
        let norms = group_norms(&model, &case(32));
        assert!(norms.len() >= 5, "{norms:?}");
        for (name, sq) in &norms {
            assert!(sq.is_finite() && *sq > 0.0, "{variant:?}: group {name} has no gradient");
        }
        if variant == Variant::Full {
            for prefix in ["enc.concat", "ctp.", "pfrf.", "kiimi.", "dec.share", "dec.seg"] {
                assert!(norms.keys().any(|k| k.starts_with(prefix)), "missing {prefix}");
            }
        }
    }
}

#[test]
fn one_step_changes_parameters_and_counts() {
    let model_cfg = narrow(Variant::Full);
    let cfg = TrainConfig {
        base_lr: 1e-3,
        total_epochs: 4,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&model_cfg, &cfg).unwrap();
    let before = state.model.store.clone();
    let rec = train_step(&mut state, &[case(32)], &cfg, &LossWeights::default()).unwrap();
    assert_eq!(rec.step, 1);
    assert_eq!(state.step, 1);
    assert!(rec.loss.total.is_finite() && rec.grad_norm > 0.0);
    assert_eq!(rec.lr, 1e-3);
    let moved = before
        .iter()
        .zip(state.model.store.iter())
        .filter(|((_, _, a), (_, _, b))| a != b)
        .count();
    assert!(moved * 10 >= before.len() * 9, "only {moved} of {} tensors moved", before.len());
}

#[test]
fn inference_paths_agree_and_normalise() {
    let model = Model::new(&narrow(Variant::Full)).unwrap();
    let c = case(32);
    let x = c.to_tensor();
    let whole = model.predict(&x).unwrap();
    let plain = tta_infer(&model, &x, false).unwrap();
    assert_eq!(whole, plain);
    let windowed = sliding_window(&model, &x, [32; 3], false).unwrap();
    let gap = whole.data().iter().zip(windowed.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-12, "single window differs by {gap}");

    let n = 32 * 32 * 32;
    for probs in [tta_infer(&model, &x, true).unwrap(), sliding_window(&model, &x, [16; 3], true).unwrap()] {
        assert_eq!(probs.shape(), &[4, 32, 32, 32]);
        for v in 0..n {
            let s: f64 = (0..4).map(|k| probs.data()[k * n + v]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
