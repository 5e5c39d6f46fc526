//! Parameterised layers. Each layer registers its tensors in a
//! [`ParamStore`] under a path prefix and reads them back onto a [`Graph`]
//! during the forward pass.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{he_normal, xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        slope: f64,
    ) -> Self {
        let fan_in = in_channels * kernel.pow(3);
        let weight = store.register(
            format!("{path}.weight"),
            he_normal(rng, &[out_channels, in_channels, kernel, kernel, kernel], fan_in, slope),
        );
        let bias = store.register(format!("{path}.bias"), Tensor::zeros(&[out_channels]));
        Conv3d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv3d(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: store.register(format!("{path}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.register(format!("{path}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.instance_norm(x, gamma, beta)
    }
}

/// Convolution, instance normalisation, LeakyReLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
    pub slope: f64,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        slope: f64,
    ) -> Self {
        ConvNormAct {
            conv: Conv3d::new(store, rng, &format!("{path}.conv"), cin, cout, 3, stride, slope),
            norm: InstanceNorm::new(store, &format!("{path}.norm"), cout),
            slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.norm.forward(g, store, y);
        g.leaky_relu(y, self.slope)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let weight = store.register(
            format!("{path}.weight"),
            xavier_uniform(rng, &[in_features, out_features], in_features, out_features),
        );
        let bias =
            bias.then(|| store.register(format!("{path}.bias"), Tensor::zeros(&[out_features])));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// Applies the layer to `[n, in]` tokens.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, path: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{path}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.register(format!("{path}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention without biases:
/// per head `softmax(Q_i K_iᵀ / √d) V_i`, heads concatenated and mapped by
/// the output matrix.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
    pub width: usize,
}

/// Attention output together with the per-head weight matrices.
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must split into heads");
        let mut mat = |name: &str| {
            store.register(
                format!("{path}.{name}"),
                xavier_uniform(rng, &[width, width], width, width),
            )
        };
        MultiHeadAttention {
            query: mat("w_q"),
            key: mat("w_k"),
            value: mat("w_v"),
            output: mat("w_o"),
            heads,
            width,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Queries come from `q_tokens`, keys and values from `kv_tokens`; both
    /// are `[n, width]` and already normalised by the caller.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_tokens: Var, kv_tokens: Var) -> AttentionTrace {
        let wq = g.param(store, self.query);
        let wk = g.param(store, self.key);
        let wv = g.param(store, self.value);
        let wo = g.param(store, self.output);
        let q = g.matmul(q_tokens, wq);
        let k = g.matmul(kv_tokens, wk);
        let v = g.matmul(kv_tokens, wv);
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * d, d);
            let kh = g.slice(k, 1, h * d, d);
            let vh = g.slice(v, 1, h * d, d);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1);
            weights.push(attn);
            heads.push(g.matmul(attn, vh));
        }
        let joined = g.concat(&heads, 1);
        AttentionTrace {
            output: g.matmul(joined, wo),
            weights,
        }
    }
}

/// Pre-norm self-attention block: `x + MHSA(LN(x))`, residual optional.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub residual: bool,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        width: usize,
        heads: usize,
        residual: bool,
    ) -> Self {
        SelfAttentionBlock {
            norm: LayerNorm::new(store, &format!("{path}.norm"), width),
            attention: MultiHeadAttention::new(store, rng, &format!("{path}.attn"), width, heads),
            residual,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> AttentionTrace {
        let normed = self.norm.forward(g, store, tokens);
        let mut trace = self.attention.forward(g, store, normed, normed);
        if self.residual {
            trace.output = g.add(tokens, trace.output);
        }
        trace
    }
}
