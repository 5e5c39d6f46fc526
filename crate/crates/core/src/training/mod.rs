//! Optimisation loop: poly learning rate, Adam, one-step updates over the
//! full objective, checkpoints and test-time inference.

mod checkpoint;
mod infer;
mod optim;

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use infer::{center_window, predict_labels, sliding_window, tta_infer, window_starts};
pub use optim::{Adam, AdamHyper};

use crate::autograd::Graph;
use crate::data::{augment_case, AugmentPolicy, MultiModalCase};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_epochs: u64,
    pub poly_power: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub coupled_weight_decay: bool,
    pub crop: [usize; 3],
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic saves.
    pub checkpoint_every: u64,
    pub tta_enabled: bool,
    /// Max global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Random flips, scale and shift on top of the crop.
    pub augment: bool,
    pub validate_every: u64,
    pub loader_workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2e-4,
            total_epochs: 50,
            poly_power: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            coupled_weight_decay: false,
            crop: [32, 32, 32],
            batch_size: 1,
            seed: 0,
            checkpoint_every: 0,
            tta_enabled: true,
            grad_clip: None,
            augment: true,
            validate_every: 0,
            loader_workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.poly_power < 0.0 {
            return bad(format!("poly_power {} must be non-negative", self.poly_power));
        }
        for (n, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{n} {b} not in (0, 1)"));
            }
        }
        if self.crop.iter().any(|&c| c == 0 || c % 16 != 0) {
            return bad(format!("crop {:?} must be positive multiples of 16", self.crop));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return bad("batch_size and total_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            coupled: self.coupled_weight_decay,
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        if self.augment {
            AugmentPolicy::standard(self.crop, self.seed)
        } else {
            AugmentPolicy::identity(self.crop)
        }
    }
}

/// `base_lr · (1 − epoch/total)^p`.
pub fn poly_lr(epoch: u64, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.total_epochs {
        return Err(Error::Range(format!(
            "epoch {epoch} beyond total_epochs {}",
            cfg.total_epochs
        )));
    }
    if epoch == cfg.total_epochs {
        return Ok(0.0);
    }
    Ok(cfg.base_lr * (1.0 - epoch as f64 / cfg.total_epochs as f64).powf(cfg.poly_power))
}

/// Parameters, optimiser moments, counters and the RNG that drives
/// augmentation and dropout.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub epoch: u64,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg)?;
        let adam = Adam::new(&model.store, cfg.adam());
        Ok(TrainState {
            model,
            adam,
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self)
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Forward, backward and Adam update on already augmented cases. The
/// epoch counter is left to the caller.
pub fn train_step(
    state: &mut TrainState,
    batch: &[MultiModalCase],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Arity { expected: 1, got: 0 });
    }
    let lr = poly_lr(state.epoch, cfg)?;
    let n_params = state.model.store.len();
    let mut grads: Vec<Option<Tensor>> = vec![None; n_params];
    let mut acc = LossBreakdown::default();
    let scale = 1.0 / batch.len() as f64;
    for case in batch {
        let labels = case.labels.as_ref().ok_or_else(|| Error::Format {
            path: case.case_id.clone().into(),
            message: "training case has no labels".into(),
        })?;
        let mut g = Graph::train(state.rng.next_u64());
        let x = g.constant(case.to_tensor());
        let out = state.model.forward(&mut g, x, true)?;
        let loss = state.model.loss(&mut g, &out, labels, weights)?;
        let b = loss.breakdown(&g);
        if !b.total.is_finite() {
            return Err(Error::NonFiniteLoss(state.step));
        }
        acc.ctp += b.ctp * scale;
        acc.share += b.share * scale;
        acc.expert += b.expert * scale;
        acc.deep += b.deep * scale;
        acc.total += b.total * scale;
        let gr = g.backward(loss.total);
        for (id, t) in gr.params() {
            let slot = &mut grads[id.index()];
            match slot {
                Some(s) => s.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b * scale),
                None => *slot = Some(t.map(|v| v * scale)),
            }
        }
    }
    let norm = grads
        .iter()
        .flatten()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss(state.step));
    }
    let mut clipped = false;
    if let Some(max) = cfg.grad_clip {
        if norm > max {
            let s = max / norm;
            grads.iter_mut().flatten().for_each(|t| t.scale_in_place(s));
            clipped = true;
            log::info!("step {}: gradient norm {norm:.4} clipped to {max}", state.step);
        }
    }
    state.adam.step(&mut state.model.store, &grads, lr);
    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        epoch: state.epoch,
        lr,
        loss: acc,
        grad_norm: norm,
        clipped,
    })
}

/// Cycles through normalised training cases, augmenting each batch with the
/// state's RNG and advancing the epoch after every pass.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub weights: &'a LossWeights,
    pub cases: &'a [MultiModalCase],
}

impl Trainer<'_> {
    pub fn steps_per_epoch(&self) -> u64 {
        self.cases.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn batch_for(&self, state: &mut TrainState) -> Result<Vec<MultiModalCase>> {
        let per_epoch = self.steps_per_epoch();
        let within = state.step % per_epoch;
        let policy = self.cfg.augment_policy();
        let start = within as usize * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(self.cases.len());
        self.cases[start..end]
            .iter()
            .map(|c| augment_case(c, &policy, &mut state.rng).map_err(|e| e.with_case(c.case_id.clone())))
            .collect()
    }

    /// Runs `steps` steps, calling `on_step` after each.
    pub fn run(
        &self,
        state: &mut TrainState,
        steps: u64,
        mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        if self.cases.is_empty() {
            return Err(Error::Config("no training cases".into()));
        }
        let per_epoch = self.steps_per_epoch();
        for _ in 0..steps {
            let batch = self.batch_for(state)?;
            let rec = train_step(state, &batch, self.cfg, self.weights)?;
            if state.step % per_epoch == 0 {
                state.epoch = (state.epoch + 1).min(self.cfg.total_epochs);
            }
            on_step(state, &rec)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_values() {
        let cfg = TrainConfig {
            total_epochs: 2000,
            ..Default::default()
        };
        assert_eq!(poly_lr(0, &cfg).unwrap(), 2e-4);
        assert_eq!(poly_lr(2000, &cfg).unwrap(), 0.0);
        assert!((poly_lr(1000, &cfg).unwrap() - 1.0718e-4).abs() < 1e-8);
        assert!(matches!(poly_lr(2001, &cfg), Err(Error::Range(_))));
        let mut prev = f64::INFINITY;
        for e in 0..=2000 {
            let lr = poly_lr(e, &cfg).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }
}
