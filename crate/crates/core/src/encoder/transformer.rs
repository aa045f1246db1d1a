//! Pre-norm transformer blocks and the small trainable encoder built from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::hidden::{HiddenSourceTag, HiddenStates};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 4, dim: 64, heads: 4, ff_dim: 256, max_len: 128 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("model dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..dim {
            let freq = 10000f64.powf(-((i - i % 2) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.normal(format!("{name}.weight"), &[d_in, d_out], std, rng),
            bias: store.zeros(format!("{name}.bias"), &[1, d_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[1, dim]),
            bias: store.zeros(format!("{name}.bias"), &[1, dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.layer_norm_rows(x)?;
        let y = g.mul_row(y, gain)?;
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            query: Linear::init(store, &format!("{name}.query"), dim, dim, std, rng),
            key: Linear::init(store, &format!("{name}.key"), dim, dim, std, rng),
            value: Linear::init(store, &format!("{name}.value"), dim, dim, std, rng),
            output: Linear::init(store, &format!("{name}.output"), dim, dim, std, rng),
            heads,
        }
    }

    /// Multi-head scaled dot-product attention of `queries` over `memory`.
    /// With `causal`, query `i` only sees memory rows `0..=i`.
    pub fn forward(&self, g: &mut Graph<'_>, queries: NodeId, memory: NodeId, causal: bool) -> Result<NodeId> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let dim = g.value(q).cols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = if causal { g.softmax_rows_causal(scores)? } else { g.softmax_rows(scores)? };
            outs.push(g.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.output.forward(g, joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        // Both projections use the model width, so the residual branch starts
        // at roughly the scale of its input.
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            up: Linear::init(store, &format!("{name}.up"), dim, hidden, std, rng),
            down: Linear::init(store, &format!("{name}.down"), hidden, dim, std, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// `x + attn(norm(x))`, then `x + ff(norm(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub attn: Attention,
    pub ff_norm: Norm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            attn_norm: Norm::init(store, &format!("{name}.attn_norm"), cfg.dim),
            attn: Attention::init(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng),
            ff_norm: Norm::init(store, &format!("{name}.ff_norm"), cfg.dim),
            ff: FeedForward::init(store, &format!("{name}.ff"), cfg.dim, cfg.ff_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.attn_norm.forward(g, x)?;
        let h = self.attn.forward(g, h, h, false)?;
        let x = g.add(x, h)?;
        let h = self.ff_norm.forward(g, x)?;
        let h = self.ff.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    positions: Tensor,
}

/// Per-layer hidden-state nodes recorded on a graph.
#[derive(Clone, Debug)]
pub struct EncodedNodes {
    /// `h = L + 1` nodes of shape `n × d`; index 0 is embedding plus position.
    pub layers: Vec<NodeId>,
    /// The same states stacked layer-major, `(h·n) × d`.
    pub flat: NodeId,
}

impl EncodedNodes {
    pub fn last(&self) -> NodeId {
        *self.layers.last().expect("at least one layer")
    }
}

impl Encoder {
    /// Registers the encoder's parameters under `encoder.*`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::config("empty vocabulary"));
        }
        let embedding = store.normal("encoder.embedding", &[vocab_size, config.dim], 1.0, rng);
        let layers =
            (0..config.layers).map(|l| EncoderLayer::init(store, &format!("encoder.layer{l}"), &config, rng)).collect();
        Ok(Self { config, vocab_size, embedding, layers, positions: sinusoidal_positions(config.max_len, config.dim) })
    }

    /// Hidden-state depth `L + 1`.
    pub fn depth(&self) -> usize {
        self.config.layers + 1
    }

    pub fn positions(&self, len: usize) -> Result<Tensor> {
        if len > self.config.max_len {
            return Err(Error::dim(format!("sequence of {len} exceeds max length {}", self.config.max_len)));
        }
        Ok(Tensor::from_parts(vec![len, self.config.dim], self.positions.data()[..len * self.config.dim].to_vec()))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("no tokens to encode".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Index(format!("token id {bad} ≥ vocabulary size {}", self.vocab_size)));
        }
        Ok(())
    }

    pub fn encode_on_graph(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<EncodedNodes> {
        self.check_ids(ids)?;
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, ids)?;
        let pos = g.constant(self.positions(ids.len())?);
        let mut x = g.add(emb, pos)?;
        let mut layers = vec![x];
        for layer in &self.layers {
            x = layer.forward(g, x)?;
            layers.push(x);
        }
        let flat = g.concat_rows(&layers)?;
        Ok(EncodedNodes { layers, flat })
    }

    /// All hidden states for `ids`, evaluated without keeping the graph.
    pub fn encode(&self, store: &ParamStore, ids: &[usize]) -> Result<HiddenStates> {
        let mut g = Graph::with_params(store);
        let nodes = self.encode_on_graph(&mut g, ids)?;
        let flat = g.value(nodes.flat);
        let states = flat.reshape(&[self.depth(), ids.len(), self.config.dim])?;
        HiddenStates::new(states, ids.to_vec(), HiddenSourceTag::Toy)
    }
}
