//! Central finite-difference checks of tape gradients.
//!
//! Every tensor under test lives in a [`ParamStore`]; the builder closure
//! rebuilds the scalar from scratch for each perturbation, so the numeric
//! side never touches the backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            max_coords: Some(24),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the probed
    /// coordinates; 0 when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every parameter in `targets` (or all parameters when empty).
pub fn check<F>(store: &ParamStore, targets: &[ParamId], opts: &GradCheckOptions, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let ids: Vec<ParamId> = if targets.is_empty() {
        store.ids().collect()
    } else {
        targets.to_vec()
    };
    let mut g = Graph::eval();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let eval = |s: &ParamStore| {
        let mut g = Graph::eval();
        let l = build(&mut g, s);
        g.value(l).item()
    };
    let mut tensors = Vec::new();
    for id in ids {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = grads.param(id);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &coords {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            coords: coords.len(),
            rel_error,
            max_abs_error: max_abs,
        });
    }
    GradCheckReport { tensors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn detects_correct_and_broken_gradients() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_fn(&[2, 3], |i| 0.3 * i as f64 - 0.4));
        let w = store.register("w", Tensor::from_fn(&[3, 2], |i| 0.1 * i as f64 + 0.2));
        let opts = GradCheckOptions::default();
        let good = check(&store, &[], &opts, |g, s| {
            let x = g.param(s, x);
            let w = g.param(s, w);
            let y = g.matmul(x, w);
            let y = g.gelu(y);
            let y = g.mul(y, y);
            g.sum(y)
        });
        assert!(good.passes(1e-6), "{good:?}");

        let bad = check(&store, &[], &opts, |g, s| {
            let x = g.param(s, x);
            let w = g.param(s, w);
            let y = g.matmul(x, w);
            let y = g.flip_grad(y);
            let y = g.mul(y, y);
            g.sum(y)
        });
        assert!(!bad.passes(1e-4));
    }
}
