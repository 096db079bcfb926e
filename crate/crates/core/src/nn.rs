//! Layers composed from graph ops. Each layer owns [`ParamId`]s into a shared store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{filled, normal, xavier, ParamGroup, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if model_dim == 0 || num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        Ok(AttentionConfig {
            model_dim,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Shared bookkeeping while registering a module's parameters.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub group: ParamGroup,
}

impl<R: Rng> Builder<'_, R> {
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = xavier(self.rng, rows, cols);
        self.store.add(name, t, self.group)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let t = normal(self.rng, rows, cols, std);
        self.store.add(name, t, self.group)
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.store.add(name, filled(rows, cols, v), self.group)
    }
}

/// `y = x W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Linear {
            weight: b.xavier(&format!("{name}.weight"), inp, out)?,
            bias: b.filled(&format!("{name}.bias"), 1, out, 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: b.filled(&format!("{name}.gain"), 1, dim, 1.0)?,
            bias: b.filled(&format!("{name}.bias"), 1, dim, 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Position-wise `W₂ ReLU(W₁ x + b₁) + b₂` with inner width `4d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, dim: usize) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(b, &format!("{name}.inner"), dim, 4 * dim)?,
            outer: Linear::new(b, &format!("{name}.outer"), 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, store, h)
    }
}

/// Learned query/key/value/output projections around [`Graph::attention`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Result of an attention call; `core` holds the per-head weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub core: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, cfg: AttentionConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(MultiHeadAttention {
            cfg,
            query: Linear::new(b, &format!("{name}.query"), d, d)?,
            key: Linear::new(b, &format!("{name}.key"), d, d)?,
            value: Linear::new(b, &format!("{name}.value"), d, d)?,
            output: Linear::new(b, &format!("{name}.output"), d, d)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<AttentionOutput> {
        let q = self.query.forward(g, store, query)?;
        let k = self.key.forward(g, store, key)?;
        let v = self.value.forward(g, store, value)?;
        let core = g.attention(q, k, v, self.cfg.num_heads, mask)?;
        let out = self.output.forward(g, store, core)?;
        Ok(AttentionOutput { out, core })
    }
}

/// Post-norm transformer block: `LN(x + MHA(x))` then `LN(h + FFN(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl TransformerBlock {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, cfg: AttentionConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(TransformerBlock {
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), cfg)?,
            attn_norm: LayerNorm::new(b, &format!("{name}.attn_norm"), d)?,
            ffn: FeedForward::new(b, &format!("{name}.ffn"), d)?,
            ffn_norm: LayerNorm::new(b, &format!("{name}.ffn_norm"), d)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let a = self.attn.forward(g, store, x, x, x, mask)?.out;
        let a = g.dropout(a)?;
        let h = g.add(x, a)?;
        let h = self.attn_norm.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = g.dropout(f)?;
        let o = g.add(h, f)?;
        self.ffn_norm.forward(g, store, o)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Embedding {
            table: b.normal(name, rows, dim, 0.1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table)?;
        g.gather_rows(t, ids)
    }
}
