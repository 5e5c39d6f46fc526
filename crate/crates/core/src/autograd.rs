//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and a
//! closure mapping the upstream gradient to parent gradients. The tape lives
//! for one forward/backward pass.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{self, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
    fault: Option<String>,
}

/// Gradients of a scalar with respect to leaves of the tape.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Parameter gradients; parameters that did not influence the loss are
    /// absent.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|(id, node)| self.leaves.get(node).map(|g| (*id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.leaves.get(n))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    /// Tape for inference: dropout disabled.
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    /// Tape for training; `seed` drives dropout masks.
    pub fn train(seed: u64) -> Self {
        Self::new(true, seed)
    }

    pub fn new(training: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fault: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Arms a deliberate backward bug in the named operation. Used by the
    /// verification suite to prove the gradient checks can fail.
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn fault_armed(&self, op: &str) -> bool {
        self.fault.as_deref() == Some(op)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: Option<BackwardFn>) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, &[], None)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Appends an op with a caller-supplied backward rule.
    pub fn custom(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        self.push(value, parents, Some(backward))
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                if node.needs_grad && node.parents.is_empty() {
                    leaves.insert(i, g);
                }
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].needs_grad)
                .collect();
            let ctx = BackwardCtx {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs,
            };
            let pgrads = bw(&ctx);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (k, pg) in pgrads.into_iter().enumerate() {
                let p = node.parents[k];
                let Some(pg) = pg else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Gradients {
            leaves,
            params: self.params.iter().map(|(id, v)| (*id, v.0)).collect(),
        }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(
            value,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(
            value,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(
            value,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.custom(value, &[a], Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut value = self.value(xs[0]).clone();
        for x in &xs[1..] {
            value.add_assign(self.value(*x));
        }
        let n = xs.len();
        self.custom(value, xs, Box::new(move |c| vec![Some(c.grad.clone()); n]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(
            value,
            &[a],
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.custom(
            value,
            &[a],
            Box::new(move |c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| {
                    if x > 0.0 {
                        g
                    } else {
                        slope * g
                    }
                }))]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)));
        self.custom(
            value,
            &[a],
            Box::new(|c| {
                let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| {
                    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                    let pdf = inv_sqrt_2pi * (-0.5 * x * x).exp();
                    g * (cdf + x * pdf)
                }))]
            }),
        )
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(self.value(a).shape(), mask).expect("mask shape");
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        self.custom(
            value,
            &[a],
            Box::new(move |c| vec![Some(c.grad.zip_map(&mask, |g, m| g * m))]),
        )
    }

    /// Identity forward, negated backward. Only reachable through
    /// [`Graph::inject_fault`].
    pub fn flip_grad(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.custom(value, &[a], Box::new(|c| vec![Some(c.grad.map(|g| -g))]))
    }

    // ----- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape");
        self.custom(
            value,
            &[a],
            Box::new(|c| {
                vec![Some(
                    c.grad
                        .clone()
                        .reshape(c.inputs[0].shape())
                        .expect("reshape back"),
                )]
            }),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let shapes: Vec<Vec<usize>> = xs.iter().map(|x| self.shape(*x).to_vec()).collect();
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        for s in &shapes {
            assert_eq!(s.len(), out_shape.len(), "concat rank mismatch");
            for (d, (a, b)) in s.iter().zip(&out_shape).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {shapes:?}");
            }
        }
        let (outer, total, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (x, s) in xs.iter().zip(&shapes) {
            let n = s[axis];
            let src = self.value(*x).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
            offset += n;
        }
        let value = Tensor::from_vec(&out_shape, data).expect("concat");
        let sizes: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        self.custom(
            value,
            xs,
            Box::new(move |c| {
                let mut offset = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(k, &n)| {
                        let start = offset;
                        offset += n;
                        if !c.needs[k] {
                            return None;
                        }
                        let g = c.grad.data();
                        let mut out = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let src = (o * total + start) * inner;
                            out.extend_from_slice(&g[src..src + n * inner]);
                        }
                        Some(Tensor::from_vec(c.inputs[k].shape(), out).expect("concat grad"))
                    })
                    .collect()
            }),
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let in_shape = self.shape(a).to_vec();
        assert!(start + len <= in_shape[axis], "slice out of range");
        let (outer, n, inner) = axis_split(&in_shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let value = Tensor::from_vec(&out_shape, data).expect("slice");
        self.custom(
            value,
            &[a],
            Box::new(move |c| {
                let mut g = Tensor::zeros(&in_shape);
                let gd = g.data_mut();
                for o in 0..outer {
                    let d = (o * n + start) * inner;
                    gd[d..d + len * inner]
                        .copy_from_slice(&c.grad.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, cc) = (v.shape()[0], v.shape()[1]);
        let value = transpose2d(v.data(), r, cc);
        let value = Tensor::from_vec(&[cc, r], value).expect("transpose");
        self.custom(
            value,
            &[a],
            Box::new(move |c| {
                vec![Some(
                    Tensor::from_vec(&[r, cc], transpose2d(c.grad.data(), cc, r)).expect("t"),
                )]
            }),
        )
    }

    /// `[c, h, w, d]` map to `[h*w*d, c]` tokens in h-major order.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let c = self.value(x).channels();
        let n = self.value(x).voxels();
        let flat = self.reshape(x, &[c, n]);
        self.transpose(flat)
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, t: Var, dims: [usize; 3]) -> Var {
        let c = self.shape(t)[1];
        let cm = self.transpose(t);
        self.reshape(cm, &[c, dims[0], dims[1], dims[2]])
    }

    // ----- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            kernels::MatRef::row_major(self.value(a).data(), k),
            kernels::MatRef::row_major(self.value(b).data(), n),
            0.0,
            &mut out,
            n,
        );
        let value = Tensor::from_vec(&[m, n], out).expect("matmul");
        self.custom(
            value,
            &[a, b],
            Box::new(move |c| {
                let g = c.grad.data();
                let da = c.needs[0].then(|| {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        kernels::MatRef::row_major(g, n),
                        kernels::MatRef::transposed(c.inputs[1].data(), n),
                        0.0,
                        &mut da,
                        k,
                    );
                    Tensor::from_vec(&[m, k], da).expect("da")
                });
                let db = c.needs[1].then(|| {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        kernels::MatRef::transposed(c.inputs[0].data(), k),
                        kernels::MatRef::row_major(g, n),
                        0.0,
                        &mut db,
                        n,
                    );
                    Tensor::from_vec(&[k, n], db).expect("db")
                });
                vec![da, db]
            }),
        )
    }

    /// Adds `bias[c]` to every row of an `[n, c]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, cdim) = (self.shape(x)[0], self.shape(x)[1]);
        assert_eq!(self.shape(bias), &[cdim], "bias width mismatch");
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cdim) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.custom(
            value,
            &[x, bias],
            Box::new(move |c| {
                let db = c.needs[1].then(|| {
                    let mut db = vec![0.0; cdim];
                    for row in c.grad.data().chunks(cdim) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    debug_assert_eq!(c.grad.len(), n * cdim);
                    Tensor::from_vec(&[cdim], db).expect("db")
                });
                vec![Some(c.grad.clone()), db]
            }),
        )
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => y,
        }
    }

    // ----- normalisation ----------------------------------------------------

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..n {
                    m = m.max(src[base + k * inner]);
                }
                let mut s = 0.0;
                for k in 0..n {
                    let e = (src[base + k * inner] - m).exp();
                    out[base + k * inner] = e;
                    s += e;
                }
                for k in 0..n {
                    out[base + k * inner] /= s;
                }
            }
        }
        let value = Tensor::from_vec(&shape, out).expect("softmax");
        self.custom(
            value,
            &[a],
            Box::new(move |c| {
                let y = c.output.data();
                let g = c.grad.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = 0.0;
                        for k in 0..n {
                            dot += g[base + k * inner] * y[base + k * inner];
                        }
                        for k in 0..n {
                            let j = base + k * inner;
                            dx[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(c.output.shape(), dx).expect("dsoftmax"))]
            }),
        )
    }

    /// Layer normalisation over the last axis of `[n, c]` with affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, cdim) = (self.shape(x)[0], self.shape(x)[1]);
        let (xhat, inv_std) = normalize_groups(self.value(x).data(), n, cdim);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for row in out.chunks_mut(cdim) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(&[n, cdim], out).expect("ln");
        self.custom(
            value,
            &[x, gamma, beta],
            Box::new(move |c| {
                let gd = c.grad.data();
                let gamma = c.inputs[1].data();
                let mut dgamma = vec![0.0; cdim];
                let mut dbeta = vec![0.0; cdim];
                for r in 0..n {
                    for j in 0..cdim {
                        dgamma[j] += gd[r * cdim + j] * xhat[r * cdim + j];
                        dbeta[j] += gd[r * cdim + j];
                    }
                }
                let dx = c.needs[0].then(|| {
                    let dxhat: Vec<f64> = gd
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * gamma[i % cdim])
                        .collect();
                    let dx = normalize_backward(&dxhat, &xhat, &inv_std, n, cdim);
                    Tensor::from_vec(&[n, cdim], dx).expect("dln")
                });
                vec![
                    dx,
                    Some(Tensor::from_vec(&[cdim], dgamma).expect("dg")),
                    Some(Tensor::from_vec(&[cdim], dbeta).expect("db")),
                ]
            }),
        )
    }

    /// Instance normalisation of a `[c, h, w, d]` map with per-channel affine
    /// terms.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let cdim = self.value(x).channels();
        let nvox = self.value(x).voxels();
        let shape = self.shape(x).to_vec();
        let (xhat, inv_std) = normalize_groups(self.value(x).data(), cdim, nvox);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for (ci, chunk) in out.chunks_mut(nvox).enumerate() {
            for v in chunk {
                *v = *v * g[ci] + b[ci];
            }
        }
        let value = Tensor::from_vec(&shape, out).expect("in");
        self.custom(
            value,
            &[x, gamma, beta],
            Box::new(move |c| {
                let gd = c.grad.data();
                let gamma = c.inputs[1].data();
                let mut dgamma = vec![0.0; cdim];
                let mut dbeta = vec![0.0; cdim];
                for ci in 0..cdim {
                    let r = ci * nvox..(ci + 1) * nvox;
                    dgamma[ci] = gd[r.clone()]
                        .iter()
                        .zip(&xhat[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    dbeta[ci] = gd[r].iter().sum();
                }
                let dx = c.needs[0].then(|| {
                    let dxhat: Vec<f64> = gd
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * gamma[i / nvox])
                        .collect();
                    let dx = normalize_backward(&dxhat, &xhat, &inv_std, cdim, nvox);
                    Tensor::from_vec(c.inputs[0].shape(), dx).expect("din")
                });
                vec![
                    dx,
                    Some(Tensor::from_vec(&[cdim], dgamma).expect("dg")),
                    Some(Tensor::from_vec(&[cdim], dbeta).expect("db")),
                ]
            }),
        )
    }

    // ----- volumetric --------------------------------------------------------

    /// 3-D convolution of `x: [cin, h, w, d]` with `w: [cout, cin, k, k, k]`,
    /// zero padding `k / 2`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let ws = self.shape(w).to_vec();
        let geo = ConvGeometry {
            in_channels: ws[1],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            input: self.value(x).spatial(),
        };
        assert_eq!(
            self.value(x).channels(),
            geo.in_channels,
            "conv input channels"
        );
        let out = kernels::conv3d_forward(
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let [ho, wo, do_] = geo.output();
        let value = Tensor::from_vec(&[geo.out_channels, ho, wo, do_], out).expect("conv");
        self.custom(
            value,
            &[x, w, b],
            Box::new(move |c| {
                let (dx, dw, db) = kernels::conv3d_backward(
                    &geo,
                    c.inputs[0].data(),
                    c.inputs[1].data(),
                    c.grad.data(),
                    c.needs[0],
                    c.needs[1] || c.needs[2],
                );
                vec![
                    dx.map(|d| Tensor::from_vec(c.inputs[0].shape(), d).expect("dx")),
                    dw.map(|d| Tensor::from_vec(c.inputs[1].shape(), d).expect("dw")),
                    db.map(|d| Tensor::from_vec(c.inputs[2].shape(), d).expect("db")),
                ]
            }),
        )
    }

    /// Trilinear resize (half-pixel centres) of a `[c, h, w, d]` map.
    pub fn resize(&mut self, x: Var, target: [usize; 3]) -> Var {
        let dims = self.value(x).spatial();
        if dims == target {
            return x;
        }
        let c = self.value(x).channels();
        let out = kernels::trilinear_resize(self.value(x).data(), c, dims, target);
        let value = Tensor::from_vec(&[c, target[0], target[1], target[2]], out).expect("resize");
        self.custom(
            value,
            &[x],
            Box::new(move |ctx| {
                let dx = kernels::trilinear_resize_adjoint(ctx.grad.data(), c, dims, target);
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("dresize"))]
            }),
        )
    }

    /// Divides every voxel's channel vector by its sum.
    pub fn normalize_channels(&mut self, x: Var) -> Var {
        let c = self.value(x).channels();
        let n = self.value(x).voxels();
        let src = self.value(x).data();
        let sums: Vec<f64> = (0..n)
            .map(|v| (0..c).map(|k| src[k * n + v]).sum())
            .collect();
        let mut out = src.to_vec();
        for k in 0..c {
            for v in 0..n {
                out[k * n + v] /= sums[v];
            }
        }
        let value = Tensor::from_vec(self.shape(x), out).expect("renorm");
        self.custom(
            value,
            &[x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut dx = vec![0.0; y.len()];
                for v in 0..n {
                    let dot: f64 = (0..c).map(|k| g[k * n + v] * y[k * n + v]).sum();
                    for k in 0..c {
                        dx[k * n + v] = (g[k * n + v] - dot) / sums[v];
                    }
                }
                vec![Some(Tensor::from_vec(ctx.output.shape(), dx).expect("drenorm"))]
            }),
        )
    }

    /// Multiplies every channel of `x: [c, ...]` by the single-channel
    /// `m: [1, ...]`.
    pub fn mul_channel_broadcast(&mut self, x: Var, m: Var) -> Var {
        let c = self.value(x).channels();
        let n = self.value(x).voxels();
        assert_eq!(self.value(m).channels(), 1, "mask must have one channel");
        assert_eq!(self.value(m).voxels(), n, "mask extent mismatch");
        let mask = self.value(m).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for k in 0..c {
            for v in 0..n {
                out[k * n + v] *= mask[v];
            }
        }
        let value = Tensor::from_vec(self.shape(x), out).expect("mulb");
        self.custom(
            value,
            &[x, m],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xs = ctx.inputs[0].data();
                let mask = ctx.inputs[1].data();
                let dx = ctx.needs[0].then(|| {
                    let mut dx = g.to_vec();
                    for k in 0..c {
                        for v in 0..n {
                            dx[k * n + v] *= mask[v];
                        }
                    }
                    Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("dx")
                });
                let dm = ctx.needs[1].then(|| {
                    let mut dm = vec![0.0; n];
                    for k in 0..c {
                        for v in 0..n {
                            dm[v] += g[k * n + v] * xs[k * n + v];
                        }
                    }
                    Tensor::from_vec(ctx.inputs[1].shape(), dm).expect("dm")
                });
                vec![dx, dm]
            }),
        )
    }

    /// Sums a `[c, h, w, d]` map over space, giving `[c]`.
    pub fn spatial_sum(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = self.value(x).voxels();
        let sums: Vec<f64> = self.value(x).data().chunks(n).map(|ch| ch.iter().sum()).collect();
        let value = Tensor::from_vec(&[shape[0]], sums).expect("ssum");
        self.custom(
            value,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = Tensor::zeros(&shape);
                for (k, ch) in dx.data_mut().chunks_mut(n).enumerate() {
                    ch.fill(g[k]);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Tiles a `[c]` vector over a spatial grid, giving `[c, h, w, d]`.
    pub fn broadcast_spatial(&mut self, v: Var, dims: [usize; 3]) -> Var {
        let c = self.shape(v)[0];
        let n: usize = dims.iter().product();
        let src = self.value(v).data().to_vec();
        let mut out = Vec::with_capacity(c * n);
        for x in &src {
            out.extend(std::iter::repeat(*x).take(n));
        }
        let value = Tensor::from_vec(&[c, dims[0], dims[1], dims[2]], out).expect("bcast");
        self.custom(
            value,
            &[v],
            Box::new(move |ctx| {
                let sums: Vec<f64> = ctx.grad.data().chunks(n).map(|ch| ch.iter().sum()).collect();
                vec![Some(Tensor::from_vec(&[c], sums).expect("dbcast"))]
            }),
        )
    }
}

fn transpose2d(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Standardises `groups` contiguous runs of `len` values (population
/// variance, `NORM_EPS` inside the square root).
fn normalize_groups(x: &[f64], groups: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    for gi in 0..groups {
        let s = &x[gi * len..(gi + 1) * len];
        let mean = s.iter().sum::<f64>() / len as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[gi] = is;
        for (o, v) in xhat[gi * len..(gi + 1) * len].iter_mut().zip(s) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

fn normalize_backward(
    dxhat: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    groups: usize,
    len: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    for gi in 0..groups {
        let r = gi * len..(gi + 1) * len;
        let g = &dxhat[r.clone()];
        let xh = &xhat[r.clone()];
        let mean_g = g.iter().sum::<f64>() / len as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / len as f64;
        for ((o, gv), xv) in dx[r].iter_mut().zip(g).zip(xh) {
            *o = inv_std[gi] * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}
