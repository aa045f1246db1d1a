//! Head assembly, relation classifier, decoder head, training and evaluation.

mod checkpoint;
mod decoder;
mod metrics;
mod predict;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use decoder::{decoder_target, DecoderHead, DecoderHeadConfig};
pub use metrics::{score, Metrics};
pub use predict::{evaluate, write_predictions_csv, write_predictions_jsonl, HeadCredit, PredictionRecord};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome, TrainState};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{render, Corpus, REInstance, SentenceConfigKind, Span};
use crate::encoder::transformer::Linear;
use crate::encoder::{Encoder, EncoderConfig, HiddenStateFile, Vocabulary};
use crate::error::{Error, Result};
use crate::routing::{head_on_graph, HeadConfig, HeadKind, RoutingHead};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    H1,
    H2,
    H3,
    Decoder,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::H1 => "h1",
            Head::H2 => "h2",
            Head::H3 => "h3",
            Head::Decoder => "decoder",
        }
    }

    pub fn routing_kind(self) -> Option<HeadKind> {
        match self {
            Head::H1 => Some(HeadKind::H1),
            Head::H2 => Some(HeadKind::H2),
            Head::H3 => Some(HeadKind::H3),
            Head::Decoder => None,
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Head::H1, Head::H2, Head::H3, Head::Decoder]
            .into_iter()
            .find(|h| h.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown head {s:?}")))
    }
}

/// Nonempty, duplicate-free, sorted set of heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HeadSet(Vec<Head>);

impl HeadSet {
    pub fn new(heads: impl IntoIterator<Item = Head>) -> Result<Self> {
        let mut v: Vec<Head> = heads.into_iter().collect();
        if v.is_empty() {
            return Err(Error::config("a head set needs at least one head"));
        }
        v.sort();
        let n = v.len();
        v.dedup();
        if v.len() != n {
            return Err(Error::config("duplicate head in head set"));
        }
        Ok(Self(v))
    }

    pub fn heads(&self) -> &[Head] {
        &self.0
    }

    pub fn contains(&self, h: Head) -> bool {
        self.0.contains(&h)
    }

    pub fn has_decoder(&self) -> bool {
        self.contains(Head::Decoder)
    }

    pub fn routing(&self) -> impl Iterator<Item = HeadKind> + '_ {
        self.0.iter().filter_map(|h| h.routing_kind())
    }
}

impl fmt::Display for HeadSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|h| h.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for HeadSet {
    type Err = Error;

    /// Comma-separated head names, e.g. `h1,h3,decoder`.
    fn from_str(s: &str) -> Result<Self> {
        HeadSet::new(s.split(',').map(str::parse).collect::<Result<Vec<_>>>()?)
    }
}

impl<'de> Deserialize<'de> for HeadSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        // Either a list of names or the comma-separated form.
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            List(Vec<Head>),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::List(heads) => HeadSet::new(heads),
            Repr::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Where hidden states come from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum BackboneConfig {
    /// Trainable toy encoder, trained jointly with the heads.
    #[default]
    Toy,
    /// Frozen states read from a hidden-state container, keyed by instance id.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub heads: HeadSet,
    #[serde(default = "default_sentence")]
    pub sentence: SentenceConfigKind,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub routing: HeadConfig,
    #[serde(default)]
    pub decoder: DecoderHeadConfig,
}

fn default_sentence() -> SentenceConfigKind {
    SentenceConfigKind::Mix
}

impl ModelConfig {
    pub fn new(heads: HeadSet, sentence: SentenceConfigKind) -> Self {
        Self {
            heads,
            sentence,
            backbone: BackboneConfig::Toy,
            encoder: EncoderConfig::default(),
            routing: HeadConfig::default(),
            decoder: DecoderHeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.has_decoder() && self.sentence == SentenceConfigKind::Mask {
            return Err(Error::config("the decoder head cannot be combined with the mask sentence configuration"));
        }
        if matches!(self.backbone, BackboneConfig::File { .. }) && self.heads.contains(Head::H2) {
            return Err(Error::config("H2 needs token-aligned entity spans, unavailable for file-backed states"));
        }
        self.encoder.validate()
    }
}

enum Backbone {
    Toy(Encoder),
    File { file: HiddenStateFile, depth: usize, dim: usize },
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backbone::Toy(_) => f.write_str("Toy"),
            Backbone::File { depth, dim, .. } => write!(f, "File({depth}×·×{dim})"),
        }
    }
}

/// An instance turned into everything a forward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub ids: Vec<usize>,
    pub entity_mask: Vec<bool>,
    pub subj_core: Span,
    pub obj_core: Span,
    pub label: usize,
    pub target: Option<Vec<usize>>,
    pub truncated: bool,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Recorded {
    /// `1 × |R|` scores used for the prediction.
    pub logits: NodeId,
    pub loss: NodeId,
    /// Relation scores of the decoder, when it is in the head set.
    pub decoder_logits: Option<NodeId>,
    /// Per routing head: (kind, stage-1 credits, stage-2 credits).
    pub credits: Vec<(HeadKind, NodeId, NodeId)>,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// Label set; logit `k` scores `relations[k]`.
    pub relations: Vec<String>,
    pub seed: u64,
    pub store: ParamStore,
    backbone: Backbone,
    heads: Vec<RoutingHead>,
    classifier: Option<Linear>,
    decoder: Option<DecoderHead>,
}

/// Words of the rendered training sentences plus raw entity tokens, which
/// decoder targets use even when the rendering hides them.
pub fn build_vocabulary(corpus: &Corpus, sentence: SentenceConfigKind, relations: usize) -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    for inst in &corpus.instances {
        words.extend(render(inst, sentence).words);
        words.extend(inst.tokens.iter().cloned());
    }
    Vocabulary::build(relations, words.iter().map(String::as_str))
}

impl Model {
    /// Registers all parameters deterministically from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, relations: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if relations.len() < 2 {
            return Err(Error::config("at least two relation labels are needed"));
        }
        if vocab.n_relations() != relations.len() {
            return Err(Error::config("vocabulary relation tokens do not match the label set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = match &config.backbone {
            BackboneConfig::Toy => Backbone::Toy(Encoder::init(&mut store, config.encoder, vocab.len(), &mut rng)?),
            BackboneConfig::File { path } => {
                let file = HiddenStateFile::open(path)?;
                let first = file
                    .manifest()
                    .records
                    .first()
                    .ok_or_else(|| Error::Empty(format!("no records in {}", path.display())))?;
                let (depth, dim) = (first.h as usize, first.d as usize);
                Backbone::File { file, depth, dim }
            }
        };
        let dim = match &backbone {
            Backbone::Toy(e) => e.config.dim,
            Backbone::File { dim, .. } => *dim,
        };
        let heads: Vec<RoutingHead> = config
            .heads
            .routing()
            .map(|k| RoutingHead::init(&mut store, k, dim, &config.routing, &mut rng))
            .collect::<Result<_>>()?;
        let classifier = if heads.is_empty() {
            None
        } else {
            let width: usize = heads.iter().map(RoutingHead::output_dim).sum();
            let id = Linear {
                weight: store.zeros("classifier.weight", &[width, relations.len()]),
                bias: store.zeros("classifier.bias", &[1, relations.len()]),
            };
            Some(id)
        };
        let decoder = if config.heads.has_decoder() {
            Some(DecoderHead::init(&mut store, config.decoder, dim, &vocab, &mut rng)?)
        } else {
            None
        };
        Ok(Self { config, vocab, relations, seed, store, backbone, heads, classifier, decoder })
    }

    /// Builds the vocabulary and label set from a training corpus.
    pub fn for_corpus(config: ModelConfig, train: &Corpus, seed: u64) -> Result<Self> {
        let relations = train.relations.clone();
        let vocab = build_vocabulary(train, config.sentence, relations.len());
        Self::new(config, vocab, relations, seed)
    }

    /// Width of the classifier input (sum of routing head outputs).
    pub fn classifier_input_dim(&self) -> usize {
        self.heads.iter().map(RoutingHead::output_dim).sum()
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.backbone {
            Backbone::Toy(e) => Some(e),
            Backbone::File { .. } => None,
        }
    }

    pub fn label_index(&self, relation: &str) -> Result<usize> {
        self.relations
            .binary_search_by(|r| r.as_str().cmp(relation))
            .map_err(|_| Error::NotFound(format!("relation {relation:?} is not in the label set")))
    }

    pub fn prepare(&self, inst: &REInstance) -> Result<Prepared> {
        self.prepare_with(inst, true)
    }

    /// Like [`Model::prepare`], but a gold label outside the label set is
    /// replaced by label 0. Predictions never depend on the gold label: the
    /// decoder reads the relation position before the relation token is fed.
    pub fn prepare_unlabeled(&self, inst: &REInstance) -> Result<Prepared> {
        self.prepare_with(inst, false)
    }

    fn prepare_with(&self, inst: &REInstance, require_label: bool) -> Result<Prepared> {
        let label = match self.label_index(&inst.relation) {
            Ok(l) => l,
            Err(e) if require_label => return Err(e),
            Err(_) => 0,
        };
        let r = render(inst, self.config.sentence);
        let max_len = self.encoder().map_or(usize::MAX, |e| e.config.max_len);
        let tok = self.vocab.tokenize_words(&r.words, max_len)?;
        let mut entity_mask = r.entity_mask();
        entity_mask.truncate(tok.ids.len());
        let target = match &self.decoder {
            Some(d) => Some(decoder_target(inst, label, &self.vocab, d.config.max_target_len)?),
            None => None,
        };
        Ok(Prepared {
            id: inst.id.clone(),
            ids: tok.ids,
            entity_mask,
            subj_core: r.subj_core,
            obj_core: r.obj_core,
            label,
            target,
            truncated: tok.truncated,
        })
    }

    pub fn prepare_corpus(&self, corpus: &Corpus) -> Result<Vec<Prepared>> {
        corpus.instances.iter().map(|i| self.prepare(i)).collect()
    }

    /// Records encoder, heads, classifier and decoder for one instance on `g`.
    pub fn record(&self, g: &mut Graph<'_>, p: &Prepared) -> Result<Recorded> {
        let (flat, depth, last) = match &self.backbone {
            Backbone::Toy(enc) => {
                let nodes = enc.encode_on_graph(g, &p.ids)?;
                (nodes.flat, enc.depth(), nodes.last())
            }
            Backbone::File { file, depth, .. } => {
                let hs = file.load(&p.id)?;
                if hs.depth() != *depth {
                    return Err(Error::dim(format!("record {} has depth {}, expected {depth}", p.id, hs.depth())));
                }
                let flat = g.constant(hs.flat());
                let last = g.constant(hs.layer(depth - 1));
                (flat, *depth, last)
            }
        };
        let mut vectors = Vec::with_capacity(self.heads.len());
        let mut credits = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mask = (head.kind == HeadKind::H2).then_some(p.entity_mask.as_slice());
            let nodes = head_on_graph(g, flat, depth, head, mask)?;
            vectors.push(nodes.vector);
            credits.push((head.kind, nodes.stage1_credits, nodes.stage2_credits));
        }
        let classified = match &self.classifier {
            Some(c) => {
                let joined = if vectors.len() == 1 { vectors[0] } else { g.concat_cols(&vectors)? };
                let logits = c.forward(g, joined)?;
                let loss = g.cross_entropy(logits, &[p.label])?;
                Some((logits, loss))
            }
            None => None,
        };
        let decoded = match (&self.decoder, &p.target) {
            (Some(d), Some(t)) => Some(d.record(g, last, t, self.vocab.relation_id(0)?)?),
            (Some(_), None) => return Err(Error::Empty(format!("instance {} has no decoder target", p.id))),
            _ => None,
        };
        let (logits, loss) = match (classified, decoded) {
            (Some((logits, ce)), Some(d)) => (logits, g.add(ce, d.loss)?),
            (Some((logits, ce)), None) => (logits, ce),
            (None, Some(d)) => (d.relation_logits, d.loss),
            (None, None) => unreachable!("head sets are nonempty"),
        };
        Ok(Recorded { logits, loss, decoder_logits: decoded.map(|d| d.relation_logits), credits })
    }

    /// Logits for one instance.
    pub fn forward(&self, inst: &REInstance) -> Result<Vec<f64>> {
        let p = self.prepare(inst)?;
        let mut g = Graph::with_params(&self.store);
        let r = self.record(&mut g, &p)?;
        Ok(g.value(r.logits).data().to_vec())
    }

    /// Mean loss over a batch, evaluated without gradients.
    pub fn loss(&self, batch: &[Prepared]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let mut total = 0.0;
        for p in batch {
            let mut g = Graph::with_params(&self.store);
            let r = self.record(&mut g, p)?;
            total += g.value(r.loss).scalar_value()?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Hidden states of one instance under the model's sentence config.
    pub fn hidden_states(&self, p: &Prepared) -> Result<crate::encoder::HiddenStates> {
        match &self.backbone {
            Backbone::Toy(enc) => enc.encode(&self.store, &p.ids),
            Backbone::File { file, .. } => file.load(&p.id),
        }
    }

    pub fn param_values(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }
}
