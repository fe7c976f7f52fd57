//! Building blocks: linear maps, MLPs, multi-head attention and transformer stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (1.0 / input as f64).sqrt();
        Ok(Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(input, output, std, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, output))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

/// Two linear maps with a nonlinearity in between.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, rng)?,
            output: Linear::new(store, &format!("{name}.output"), hidden, output, rng)?,
            activation: Activation::Gelu,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = match self.activation {
            Activation::Gelu => g.gelu(h),
            Activation::Identity => h,
        };
        self.output.forward(g, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, d, 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, d))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Attention output plus the per-head weight matrices.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: bool) -> AttentionOutput {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let d = g.shape(q).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let w = if causal {
                g.causal_softmax(scores)
            } else {
                g.softmax(scores)
            };
            weights.push(w);
            outs.push(g.matmul(w, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttentionOutput {
            output: self.out.forward(g, joined),
            weights,
        }
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, ffn_width, d, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let a = self.attention.forward(g, x, x, false).output;
        let a = g.dropout(a);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = self.ffn.forward(g, x);
        let f = g.dropout(f);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_width: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), d, heads, ffn_width, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, x);
        }
        x
    }
}

/// Post-norm decoder layer: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, ffn_width, d, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d)?,
        })
    }

    /// Returns the layer output and the cross-attention weights per head.
    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var) -> (Var, Vec<Var>) {
        let a = self.self_attention.forward(g, x, x, true).output;
        let a = g.dropout(a);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let cross = self.cross_attention.forward(g, x, memory, false);
        let c = g.dropout(cross.output);
        let x = g.add(x, c);
        let x = self.norm2.forward(g, x);
        let f = self.ffn.forward(g, x);
        let f = g.dropout(f);
        let x = g.add(x, f);
        (self.norm3.forward(g, x), cross.weights)
    }
}
