//! Relation-extraction instances, corpora, readers, and generators.

mod conll04;
mod io;
mod noise;
mod render;
mod synth;
mod tacred;

pub use conll04::{parse_conll04, parse_conll04_str};
pub use io::{read_flip_log, read_jsonl, write_flip_log, write_jsonl};
pub use noise::{inject_label_noise, Flip};
pub use render::{parse_mix, render, ParsedMix, Rendered, SentenceConfigKind};
pub use synth::{generate_synthetic, SynthCorpus, SynthSpec};
pub use tacred::{parse_tacred_json, parse_tacred_str, to_tacred_json};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label of instances whose entity pair holds none of the relations.
pub const NO_RELATION: &str = "no_relation";

/// Inclusive token range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct REInstance {
    pub id: String,
    pub tokens: Vec<String>,
    pub subj_span: Span,
    pub obj_span: Span,
    pub subj_type: String,
    pub obj_type: String,
    pub relation: String,
}

impl REInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Empty(format!("instance {} has no tokens", self.id)));
        }
        for (name, s) in [("subject", self.subj_span), ("object", self.obj_span)] {
            if s.end < s.start || s.end >= n {
                return Err(Error::Index(format!(
                    "instance {}: {name} span {}..={} outside {n} tokens",
                    self.id, s.start, s.end
                )));
            }
        }
        if self.subj_span.overlaps(&self.obj_span) {
            return Err(Error::Index(format!("instance {}: entity spans overlap", self.id)));
        }
        if self.subj_type.is_empty() || self.obj_type.is_empty() {
            return Err(Error::Empty(format!("instance {} has an empty entity type", self.id)));
        }
        if self.relation.is_empty() {
            return Err(Error::Empty(format!("instance {} has an empty relation", self.id)));
        }
        Ok(())
    }

    pub fn is_negative(&self) -> bool {
        self.relation == NO_RELATION
    }

    pub fn subject_words(&self) -> &[String] {
        &self.tokens[self.subj_span.start..=self.subj_span.end]
    }

    pub fn object_words(&self) -> &[String] {
        &self.tokens[self.obj_span.start..=self.obj_span.end]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub instances: Vec<REInstance>,
    /// Sorted label set, `no_relation` included when present.
    pub relations: Vec<String>,
    pub entity_types: Vec<String>,
    pub split: Split,
}

impl Corpus {
    /// Validates every instance and derives the label and type sets.
    pub fn new(instances: Vec<REInstance>, split: Split) -> Result<Self> {
        let relations: BTreeSet<&str> = instances.iter().map(|i| i.relation.as_str()).collect();
        let relations = relations.into_iter().map(str::to_string).collect();
        Self::with_relations(instances, relations, split)
    }

    /// Like [`Corpus::new`] with an explicit label set that must cover every instance.
    pub fn with_relations(instances: Vec<REInstance>, mut relations: Vec<String>, split: Split) -> Result<Self> {
        relations.sort();
        relations.dedup();
        let mut ids = BTreeSet::new();
        for inst in &instances {
            inst.validate()?;
            if relations.binary_search(&inst.relation).is_err() {
                return Err(Error::config(format!(
                    "instance {} has relation {:?} outside the label set",
                    inst.id, inst.relation
                )));
            }
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::config(format!("duplicate instance id {:?}", inst.id)));
            }
        }
        let types: BTreeSet<&str> =
            instances.iter().flat_map(|i| [i.subj_type.as_str(), i.obj_type.as_str()]).collect();
        let entity_types = types.into_iter().map(str::to_string).collect();
        Ok(Self { instances, relations, entity_types, split })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&REInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Instances whose subject and object types match, e.g. the
    /// person–person subset of a corpus.
    pub fn filter_type_pair(&self, subj_type: &str, obj_type: &str) -> Result<Self> {
        let kept =
            self.instances.iter().filter(|i| i.subj_type == subj_type && i.obj_type == obj_type).cloned().collect();
        Self::with_relations(kept, self.relations.clone(), self.split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Relation labels other than `no_relation`.
    pub n_relations: usize,
    pub n_entity_types: usize,
    pub size: usize,
    pub negative_fraction: f64,
}

pub fn dataset_stats(corpus: &Corpus) -> Result<DatasetStats> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus has no instances".into()));
    }
    let labels: BTreeSet<&str> =
        corpus.instances.iter().map(|i| i.relation.as_str()).filter(|r| *r != NO_RELATION).collect();
    let types: BTreeSet<&str> =
        corpus.instances.iter().flat_map(|i| [i.subj_type.as_str(), i.obj_type.as_str()]).collect();
    let negatives = corpus.instances.iter().filter(|i| i.is_negative()).count();
    Ok(DatasetStats {
        n_relations: labels.len(),
        n_entity_types: types.len(),
        size: corpus.len(),
        negative_fraction: negatives as f64 / corpus.len() as f64,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// "x was getting married to y ." with two person entities.
    pub fn married() -> REInstance {
        REInstance {
            id: "m1".into(),
            tokens: "x was getting married to y .".split(' ').map(String::from).collect(),
            subj_span: Span::new(0, 0),
            obj_span: Span::new(5, 5),
            subj_type: "person".into(),
            obj_type: "person".into(),
            relation: "per:spouse".into(),
        }
    }
}
