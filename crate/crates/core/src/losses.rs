//! Soft Dice, weighted cross-entropy and the composite objectives.
//!
//! Predictions are `[4, h, w, d]` probability fields on the graph; ground
//! truth is a constant one-hot tensor of the same layout.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{LabelMap, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added inside `log` so a zero probability stays finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Largest tolerated deviation of a prediction column sum from 1.
pub const NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class_weights: [f64; NUM_CLASSES],
    pub epsilon: f64,
    /// Divide the summed Dice terms by the class count.
    pub dice_normalize_by_classes: bool,
    /// Squared sums in the Dice denominator.
    pub dice_squared_denominator: bool,
    /// Per-voxel mean instead of the raw voxel sum.
    pub wce_mean: bool,
    /// Replace `class_weights` by clipped inverse class frequencies of each
    /// batch.
    pub inverse_frequency: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class_weights: [1.0; NUM_CLASSES],
            epsilon: 1e-5,
            dice_normalize_by_classes: true,
            dice_squared_denominator: true,
            wce_mean: true,
            inverse_frequency: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.class_weights.iter().any(|&w| w < 0.0 || !w.is_finite())
            || self.class_weights.iter().all(|&w| w == 0.0)
        {
            return Err(Error::Config(format!(
                "class weights {:?} must be non-negative with one positive",
                self.class_weights
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }

    /// Weights for this batch's truth: fixed, or `N / (K n_k)` clipped to
    /// [0.1, 10].
    pub fn resolve(&self, labels: &LabelMap) -> LossWeights {
        if !self.inverse_frequency {
            return self.clone();
        }
        let n = labels.data.len() as f64;
        let mut out = self.clone();
        for k in 0..NUM_CLASSES {
            let count = labels.count(k as u8) as f64;
            out.class_weights[k] = if count == 0.0 {
                10.0
            } else {
                (n / (NUM_CLASSES as f64 * count)).clamp(0.1, 10.0)
            };
        }
        out
    }
}

fn check_pair(g: &Graph, pred: Var, truth: &Tensor) -> Result<()> {
    let p = g.value(pred);
    if p.shape() != truth.shape() || p.shape().first() != Some(&NUM_CLASSES) {
        return Err(Error::shape(format!(
            "prediction {:?} vs truth {:?}",
            p.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

/// Fails when any voxel's class probabilities do not sum to 1.
pub fn check_normalized(t: &Tensor) -> Result<()> {
    let n = t.voxels();
    let c = t.channels();
    for v in 0..n {
        let s: f64 = (0..c).map(|k| t.data()[k * n + v]).sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL || !s.is_finite() {
            return Err(Error::Normalization(s));
        }
    }
    Ok(())
}

pub fn dice_loss(g: &mut Graph, pred: Var, truth: &Tensor, w: &LossWeights) -> Result<Var> {
    check_pair(g, pred, truth)?;
    check_normalized(g.value(pred))?;
    let n = truth.voxels();
    let p = g.value(pred).data().to_vec();
    let t = truth.data().to_vec();
    let squared = w.dice_squared_denominator;
    let eps = w.epsilon;
    let mut inter = [0.0; NUM_CLASSES];
    let mut denom = [0.0; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        let (pk, tk) = (&p[k * n..(k + 1) * n], &t[k * n..(k + 1) * n]);
        inter[k] = pk.iter().zip(tk).map(|(a, b)| a * b).sum();
        denom[k] = if squared {
            tk.iter().map(|x| x * x).sum::<f64>() + pk.iter().map(|x| x * x).sum::<f64>()
        } else {
            tk.iter().sum::<f64>() + pk.iter().sum::<f64>()
        } + eps;
    }
    let scale = if w.dice_normalize_by_classes {
        1.0 / NUM_CLASSES as f64
    } else {
        1.0
    };
    let terms: f64 = (0..NUM_CLASSES).map(|k| 2.0 * inter[k] / denom[k]).sum();
    let value = Tensor::scalar(1.0 - scale * terms);
    Ok(g.custom(
        value,
        &[pred],
        Box::new(move |ctx| {
            let up = ctx.grad.item();
            let mut dp = vec![0.0; p.len()];
            for k in 0..NUM_CLASSES {
                for j in 0..n {
                    let i = k * n + j;
                    let ddenom = if squared { 2.0 * p[i] } else { 1.0 };
                    let dterm = 2.0 * t[i] / denom[k] - 2.0 * inter[k] * ddenom / (denom[k] * denom[k]);
                    dp[i] = -scale * dterm * up;
                }
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dp).expect("dice grad"))]
        }),
    ))
}

pub fn weighted_ce(g: &mut Graph, pred: Var, truth: &Tensor, w: &LossWeights) -> Result<Var> {
    check_pair(g, pred, truth)?;
    let n = truth.voxels();
    let p = g.value(pred).data().to_vec();
    let t = truth.data().to_vec();
    let omega = w.class_weights;
    let norm = if w.wce_mean { 1.0 / n as f64 } else { 1.0 };
    let mut total = 0.0;
    for k in 0..NUM_CLASSES {
        for j in 0..n {
            let i = k * n + j;
            if t[i] != 0.0 && omega[k] != 0.0 {
                total -= omega[k] * t[i] * (p[i] + LOG_FLOOR).ln();
            }
        }
    }
    let value = Tensor::scalar(total * norm);
    Ok(g.custom(
        value,
        &[pred],
        Box::new(move |ctx| {
            let up = ctx.grad.item();
            let mut dp = vec![0.0; p.len()];
            for k in 0..NUM_CLASSES {
                for j in 0..n {
                    let i = k * n + j;
                    dp[i] = -omega[k] * t[i] / (p[i] + LOG_FLOOR) * norm * up;
                }
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dp).expect("wce grad"))]
        }),
    ))
}

/// WCE + Dice.
pub fn combined_loss(g: &mut Graph, pred: Var, truth: &Tensor, w: &LossWeights) -> Result<Var> {
    let a = weighted_ce(g, pred, truth, w)?;
    let b = dice_loss(g, pred, truth, w)?;
    Ok(g.add(a, b))
}

/// Trilinear resize of a probability field followed by renormalisation;
/// identity when already at `dims`.
pub fn upsample_probs(g: &mut Graph, p: Var, dims: [usize; 3]) -> Var {
    if g.value(p).spatial() == dims {
        return p;
    }
    let r = g.resize(p, dims);
    g.normalize_channels(r)
}

fn check_arity(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Arity { expected, got });
    }
    Ok(())
}

/// Sum over the four modality region maps, each upsampled to the truth.
pub fn ctp_loss(g: &mut Graph, maps: &[Var], truth: &Tensor, w: &LossWeights) -> Result<Var> {
    check_arity(maps.len(), 4)?;
    let dims = truth.spatial();
    let mut terms = Vec::with_capacity(4);
    for &m in maps {
        let up = upsample_probs(g, m, dims);
        terms.push(combined_loss(g, up, truth, w)?);
    }
    Ok(g.add_n(&terms))
}

/// Sum over the five shared-decoder branches at full resolution.
pub fn share_loss(g: &mut Graph, preds: &[Var], truth: &Tensor, w: &LossWeights) -> Result<Var> {
    check_arity(preds.len(), 5)?;
    let terms = preds
        .iter()
        .map(|&p| combined_loss(g, p, truth, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.add_n(&terms))
}

/// Expert maps for levels 1..4: WCE on the upsampled map, Dice at the map's
/// own resolution against nearest-downsampled labels.
pub fn expert_loss(g: &mut Graph, maps: &[Var], labels: &LabelMap, w: &LossWeights) -> Result<Var> {
    check_arity(maps.len(), 4)?;
    let truth = labels.one_hot();
    let mut terms = Vec::with_capacity(8);
    for &m in maps {
        let native = g.value(m).spatial();
        let up = upsample_probs(g, m, labels.dims);
        terms.push(weighted_ce(g, up, &truth, w)?);
        let small = labels.resize_nearest(native).one_hot();
        terms.push(dice_loss(g, m, &small, w)?);
    }
    Ok(g.add_n(&terms))
}

/// Sum over the five decoder blocks, each upsampled to the truth.
pub fn deep_supervision_loss(g: &mut Graph, blocks: &[Var], truth: &Tensor, w: &LossWeights) -> Result<Var> {
    check_arity(blocks.len(), 5)?;
    let dims = truth.spatial();
    let mut terms = Vec::with_capacity(5);
    for &b in blocks {
        let up = upsample_probs(g, b, dims);
        terms.push(combined_loss(g, up, truth, w)?);
    }
    Ok(g.add_n(&terms))
}

/// `[ctp, share, expert, deep supervision]`.
pub fn total_loss(g: &mut Graph, components: &[Var]) -> Result<Var> {
    check_arity(components.len(), 4)?;
    Ok(g.add_n(components))
}

/// Scalar values of each loss component for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctp: f64,
    pub share: f64,
    pub expert: f64,
    pub deep: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::eval();
        let v = f(&mut g);
        g.value(v).item()
    }

    fn one_voxel(probs: [f64; 4]) -> Tensor {
        Tensor::from_vec(&[4, 1, 1, 1], probs.to_vec()).unwrap()
    }

    #[test]
    fn dice_perfect_literal_and_uniform() {
        let w = LossWeights::default();
        let truth = LabelMap {
            dims: [2, 1, 2],
            data: vec![0, 1, 2, 3],
        }
        .one_hot();
        let l = eval(|g| {
            let p = g.constant(truth.clone());
            dice_loss(g, p, &truth, &w).unwrap()
        });
        assert!(l.abs() < 2.0 * w.epsilon);
        let literal = LossWeights {
            dice_normalize_by_classes: false,
            ..w.clone()
        };
        let l = eval(|g| {
            let p = g.constant(truth.clone());
            dice_loss(g, p, &truth, &literal).unwrap()
        });
        assert!((l + 3.0).abs() < 1e-4);

        let t = one_voxel([0.0, 1.0, 0.0, 0.0]);
        let l = eval(|g| {
            let p = g.constant(one_voxel([0.25; 4]));
            dice_loss(g, p, &t, &w).unwrap()
        });
        let expected = 1.0 - 0.25 * (2.0 * 0.25 / (1.0 + 0.0625 + 1e-5));
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.8824).abs() < 1e-4);
    }

    #[test]
    fn dice_disjoint_is_one() {
        let w = LossWeights::default();
        let t = one_voxel([0.0, 1.0, 0.0, 0.0]);
        let l = eval(|g| {
            let p = g.constant(one_voxel([0.0, 0.0, 1.0, 0.0]));
            dice_loss(g, p, &t, &w).unwrap()
        });
        assert_eq!(l, 1.0);
    }

    #[test]
    fn unnormalized_prediction_rejected() {
        let mut g = Graph::eval();
        let p = g.constant(one_voxel([0.5, 0.5, 0.5, 0.0]));
        let err = dice_loss(&mut g, p, &one_voxel([1.0, 0.0, 0.0, 0.0]), &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Normalization(_)));
    }

    #[test]
    fn wce_values() {
        let w = LossWeights::default();
        let t = one_voxel([0.0, 0.0, 1.0, 0.0]);
        let l = eval(|g| {
            let p = g.constant(one_voxel([0.25; 4]));
            weighted_ce(g, p, &t, &w).unwrap()
        });
        assert!((l - 4f64.ln()).abs() < 1e-10);
        let mut w2 = w.clone();
        w2.class_weights[2] = 2.0;
        let l2 = eval(|g| {
            let p = g.constant(one_voxel([0.25; 4]));
            weighted_ce(g, p, &t, &w2).unwrap()
        });
        assert_eq!(l2, 2.0 * l);
        let l = eval(|g| {
            let p = g.constant(t.clone());
            weighted_ce(g, p, &t, &w).unwrap()
        });
        assert!(l.abs() < 1e-11);
    }

    #[test]
    fn arity_errors() {
        let mut g = Graph::eval();
        let t = one_voxel([1.0, 0.0, 0.0, 0.0]);
        let p = g.constant(t.clone());
        let w = LossWeights::default();
        assert!(matches!(ctp_loss(&mut g, &[p; 3], &t, &w), Err(Error::Arity { .. })));
        assert!(matches!(share_loss(&mut g, &[p; 4], &t, &w), Err(Error::Arity { .. })));
        assert!(matches!(deep_supervision_loss(&mut g, &[p; 6], &t, &w), Err(Error::Arity { .. })));
        assert!(matches!(total_loss(&mut g, &[p; 3]), Err(Error::Arity { .. })));
    }

    #[test]
    fn total_adds_components() {
        let l = eval(|g| {
            let c: Vec<Var> = [1.0, 2.0, 3.0, 4.0].iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
            total_loss(g, &c).unwrap()
        });
        assert_eq!(l, 10.0);
    }

    #[test]
    fn inverse_frequency_is_clipped() {
        let labels = LabelMap {
            dims: [1, 1, 8],
            data: vec![0, 0, 0, 0, 0, 0, 1, 2],
        };
        let w = LossWeights {
            inverse_frequency: true,
            ..Default::default()
        }
        .resolve(&labels);
        assert_eq!(w.class_weights, [8.0 / 24.0, 2.0, 2.0, 10.0]);
    }
}
