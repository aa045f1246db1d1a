//! Sequence head that reads the last hidden state and emits
//! `subject SEP object SEP relation EOS`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::REInstance;
use crate::encoder::transformer::{sinusoidal_positions, Attention, FeedForward, Linear, Norm};
use crate::encoder::vocab::{EOS_ID, SEP_ID};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderHeadConfig {
    pub layers: usize,
    /// Model width; must equal the encoder width when given.
    pub dim: Option<usize>,
    pub heads: usize,
    pub max_target_len: usize,
    pub ff_dim: usize,
}

impl Default for DecoderHeadConfig {
    fn default() -> Self {
        Self { layers: 2, dim: None, heads: 4, max_target_len: 24, ff_dim: 256 }
    }
}

impl DecoderHeadConfig {
    pub fn validate(&self, encoder_dim: usize) -> Result<()> {
        if let Some(d) = self.dim {
            if d != encoder_dim {
                return Err(Error::config(format!("decoder dim {d} does not match encoder dim {encoder_dim}")));
            }
        }
        if self.layers == 0 || self.heads == 0 || self.ff_dim == 0 || self.max_target_len < 4 {
            return Err(Error::config("decoder sizes must be positive and allow a 4-token target"));
        }
        if !encoder_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("decoder width {encoder_dim} is not divisible by {} heads", self.heads)));
        }
        Ok(())
    }
}

/// `[subject…, SEP, object…, SEP, relation token, EOS]`. The relation sits
/// at position `len − 2`.
pub fn decoder_target(inst: &REInstance, relation: usize, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    if inst.subj_span.is_empty() || inst.obj_span.is_empty() {
        return Err(Error::Empty(format!("instance {} has an empty entity span", inst.id)));
    }
    let mut t: Vec<usize> = inst.subject_words().iter().map(|w| vocab.id(w)).collect();
    t.push(SEP_ID);
    t.extend(inst.object_words().iter().map(|w| vocab.id(w)));
    t.extend([SEP_ID, vocab.relation_id(relation)?, EOS_ID]);
    if t.len() > max_len {
        return Err(Error::dim(format!(
            "decoder target of {} tokens for instance {} exceeds {max_len}",
            t.len(),
            inst.id
        )));
    }
    Ok(t)
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderHead {
    pub config: DecoderHeadConfig,
    embedding: ParamId,
    memory_norm: Norm,
    layers: Vec<DecoderLayer>,
    final_norm: Norm,
    output: Linear,
    positions: Tensor,
    n_relations: usize,
}

/// Nodes of one teacher-forced decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderNodes {
    /// Mean token cross-entropy, `[1×1]`.
    pub loss: NodeId,
    /// Scores of the relation tokens at the relation position, `1 × |R|`.
    pub relation_logits: NodeId,
}

impl DecoderHead {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: DecoderHeadConfig,
        dim: usize,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(dim)?;
        let v = vocab.len();
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("decoder.layer{l}");
                DecoderLayer {
                    self_norm: Norm::init(store, &format!("{name}.self_norm"), dim),
                    self_attn: Attention::init(store, &format!("{name}.self_attn"), dim, config.heads, rng),
                    cross_norm: Norm::init(store, &format!("{name}.cross_norm"), dim),
                    cross_attn: Attention::init(store, &format!("{name}.cross_attn"), dim, config.heads, rng),
                    ff_norm: Norm::init(store, &format!("{name}.ff_norm"), dim),
                    ff: FeedForward::init(store, &format!("{name}.ff"), dim, config.ff_dim, rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            embedding: store.normal("decoder.embedding", &[v, dim], 1.0, rng),
            memory_norm: Norm::init(store, "decoder.memory_norm", dim),
            layers,
            final_norm: Norm::init(store, "decoder.final_norm", dim),
            output: Linear::init(store, "decoder.output", dim, v, 1.0 / (dim as f64).sqrt(), rng),
            positions: sinusoidal_positions(config.max_target_len, dim),
            n_relations: vocab.n_relations(),
        })
    }

    /// Teacher-forced pass: the input is `SEP` followed by the target shifted
    /// right by one, attending causally to itself and fully to `memory`.
    pub fn record(
        &self,
        g: &mut Graph<'_>,
        memory: NodeId,
        target: &[usize],
        relation_base: usize,
    ) -> Result<DecoderNodes> {
        let len = target.len();
        if len < 4 || len > self.config.max_target_len {
            return Err(Error::dim(format!("decoder target of {len} tokens")));
        }
        let dim = g.value(memory).cols();
        let mut inputs = Vec::with_capacity(len);
        inputs.push(SEP_ID);
        inputs.extend_from_slice(&target[..len - 1]);
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, &inputs)?;
        let pos = g.constant(Tensor::from_parts(vec![len, dim], self.positions.data()[..len * dim].to_vec()));
        let mut x = g.add(emb, pos)?;
        let mem = self.memory_norm.forward(g, memory)?;
        for layer in &self.layers {
            let h = layer.self_norm.forward(g, x)?;
            let h = layer.self_attn.forward(g, h, h, true)?;
            x = g.add(x, h)?;
            let h = layer.cross_norm.forward(g, x)?;
            let h = layer.cross_attn.forward(g, h, mem, false)?;
            x = g.add(x, h)?;
            let h = layer.ff_norm.forward(g, x)?;
            let h = layer.ff.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let x = self.final_norm.forward(g, x)?;
        let logits = self.output.forward(g, x)?;
        let loss = g.cross_entropy(logits, target)?;
        let row = g.select_rows(logits, &[len - 2])?;
        let relation_logits = g.slice_cols(row, relation_base, self.n_relations)?;
        Ok(DecoderNodes { loss, relation_logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Span, NO_RELATION};

    fn inst(subj: &str, obj: &str) -> REInstance {
        let mut tokens: Vec<String> = subj.split(' ').map(String::from).collect();
        let s_end = tokens.len() - 1;
        tokens.push("met".into());
        let o_start = tokens.len();
        tokens.extend(obj.split(' ').map(String::from));
        REInstance {
            id: "d".into(),
            subj_span: Span::new(0, s_end),
            obj_span: Span::new(o_start, tokens.len() - 1),
            tokens,
            subj_type: "t".into(),
            obj_type: "t".into(),
            relation: NO_RELATION.into(),
        }
    }

    #[test]
    fn target_layout() {
        let vocab = Vocabulary::build(5, ["x", "y", "met"]);
        let t = decoder_target(&inst("x", "y"), 3, &vocab, 24).unwrap();
        assert_eq!(t, vec![vocab.id("x"), SEP_ID, vocab.id("y"), SEP_ID, vocab.relation_id(3).unwrap(), EOS_ID]);
        assert_eq!(vocab.relation_index(t[t.len() - 2]), Some(3));
        assert!(decoder_target(&inst("x x x", "y y"), 0, &vocab, 8).is_err());
        let mut empty = inst("x", "y");
        empty.obj_span = Span::new(3, 2);
        assert!(matches!(decoder_target(&empty, 0, &vocab, 24), Err(Error::Empty(_))));
    }

    #[test]
    fn width_must_match_encoder() {
        let cfg = DecoderHeadConfig { dim: Some(32), ..DecoderHeadConfig::default() };
        assert!(cfg.validate(64).is_err());
        assert!(cfg.validate(32).is_ok());
    }
}
