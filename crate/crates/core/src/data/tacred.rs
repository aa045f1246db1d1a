//! Reader and writer for the Tacred JSON schema (also used by Tacrev and Re-Tacred).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Corpus, REInstance, Span, Split};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    token: Vec<String>,
    subj_start: usize,
    subj_end: usize,
    obj_start: usize,
    obj_end: usize,
    subj_type: String,
    obj_type: String,
    relation: String,
}

/// Parses a Tacred-format JSON array. Records without an `id` are named by
/// their index in the array.
pub fn parse_tacred_str(text: &str, source_name: &str, split: Split) -> Result<Corpus> {
    let err = |record: usize, message: String| Error::Parse { source_name: source_name.to_string(), record, message };
    let value: Value = serde_json::from_str(text).map_err(|e| err(0, e.to_string()))?;
    let Value::Array(items) = value else {
        return Err(err(0, "expected a JSON array of records".into()));
    };
    let mut instances = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        let r: Record = serde_json::from_value(item).map_err(|e| err(i, e.to_string()))?;
        let inst = REInstance {
            id: r.id.unwrap_or_else(|| i.to_string()),
            tokens: r.token,
            subj_span: Span::new(r.subj_start, r.subj_end),
            obj_span: Span::new(r.obj_start, r.obj_end),
            subj_type: r.subj_type,
            obj_type: r.obj_type,
            relation: r.relation,
        };
        inst.validate().map_err(|e| err(i, e.to_string()))?;
        instances.push(inst);
    }
    Corpus::new(instances, split)
}

pub fn parse_tacred_json(path: &Path, split: Split) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    parse_tacred_str(&text, &path.display().to_string(), split)
}

pub fn to_tacred_json(corpus: &Corpus) -> Result<String> {
    let records: Vec<Record> = corpus
        .instances
        .iter()
        .map(|i| Record {
            id: Some(i.id.clone()),
            token: i.tokens.clone(),
            subj_start: i.subj_span.start,
            subj_end: i.subj_span.end,
            obj_start: i.obj_span.start,
            obj_end: i.obj_span.end,
            subj_type: i.subj_type.clone(),
            obj_type: i.obj_type.clone(),
            relation: i.relation.clone(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}
