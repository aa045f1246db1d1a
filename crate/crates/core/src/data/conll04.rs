//! Conll04 readers. Accepts the original column format (one token per line,
//! blank line, relation lines `arg1 arg2 label`) and the JSON layout with
//! `tokens`/`entities`/`relations` used by span-based extractors. Every
//! relation triple becomes one instance.

use std::path::Path;

use serde::Deserialize;

use super::{Corpus, REInstance, Span, Split};
use crate::error::{Error, Result};

pub fn parse_conll04(path: &Path, split: Split) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    parse_conll04_str(&text, &path.display().to_string(), split)
}

pub fn parse_conll04_str(text: &str, source_name: &str, split: Split) -> Result<Corpus> {
    let instances = if text.trim_start().starts_with('[') {
        parse_json(text, source_name)?
    } else {
        parse_columns(text, source_name)?
    };
    Corpus::new(instances, split)
}

struct Entity {
    span: Span,
    ty: String,
}

fn instance(id: String, tokens: &[String], head: &Entity, tail: &Entity, relation: &str) -> REInstance {
    REInstance {
        id,
        tokens: tokens.to_vec(),
        subj_span: head.span,
        obj_span: tail.span,
        subj_type: head.ty.clone(),
        obj_type: tail.ty.clone(),
        relation: relation.to_string(),
    }
}

fn parse_columns(text: &str, source_name: &str) -> Result<Vec<REInstance>> {
    let err = |record: usize, message: String| Error::Parse { source_name: source_name.to_string(), record, message };
    let mut out = Vec::new();
    let mut sentence: Option<(String, Vec<String>, Vec<Option<Entity>>)> = None;
    let mut n_sentences = 0;
    let mut rel_count = 0;
    for line in text.lines() {
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let cols = if cols.len() == 1 { line.split_whitespace().collect() } else { cols };
        if cols.iter().all(|c| c.is_empty()) {
            continue;
        }
        if cols.len() >= 6 {
            let starts_new = match &sentence {
                Some((id, _, ents)) => id != cols[0] || rel_count > 0 || cols[2] == "0" && !ents.is_empty(),
                None => true,
            };
            if starts_new {
                n_sentences += 1;
                rel_count = 0;
                sentence = Some((cols[0].to_string(), Vec::new(), Vec::new()));
            }
            let (_, tokens, ents) = sentence.as_mut().expect("sentence started above");
            let word_idx: usize =
                cols[2].parse().map_err(|_| err(n_sentences - 1, format!("bad word index {:?}", cols[2])))?;
            if word_idx != ents.len() {
                return Err(err(n_sentences - 1, format!("word index {word_idx} out of order")));
            }
            let start = tokens.len();
            for w in cols[5].split('/').filter(|w| !w.is_empty()) {
                tokens.push(if w == "COMMA" { ",".to_string() } else { w.to_string() });
            }
            if tokens.len() == start {
                return Err(err(n_sentences - 1, "empty word column".into()));
            }
            ents.push(
                (cols[1] != "O").then(|| Entity { span: Span::new(start, tokens.len() - 1), ty: cols[1].to_string() }),
            );
        } else if cols.len() == 3 {
            let Some((sid, tokens, ents)) = &sentence else {
                return Err(err(0, "relation line before any sentence".into()));
            };
            let record = n_sentences - 1;
            let idx = |s: &str| -> Result<&Entity> {
                let i: usize = s.parse().map_err(|_| err(record, format!("bad argument {s:?}")))?;
                ents.get(i)
                    .and_then(Option::as_ref)
                    .ok_or_else(|| err(record, format!("argument {i} is not an entity")))
            };
            let (head, tail) = (idx(cols[0])?, idx(cols[1])?);
            let inst = instance(format!("{sid}-{rel_count}"), tokens, head, tail, cols[2]);
            inst.validate().map_err(|e| err(record, e.to_string()))?;
            out.push(inst);
            rel_count += 1;
        } else {
            return Err(err(n_sentences.saturating_sub(1), format!("unexpected line {line:?}")));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonEntity {
    #[serde(rename = "type")]
    ty: String,
    start: usize,
    /// Exclusive.
    end: usize,
}

#[derive(Deserialize)]
struct JsonRelation {
    #[serde(rename = "type")]
    ty: String,
    head: usize,
    tail: usize,
}

#[derive(Deserialize)]
struct JsonSentence {
    tokens: Vec<String>,
    entities: Vec<JsonEntity>,
    relations: Vec<JsonRelation>,
    #[serde(default)]
    orig_id: Option<serde_json::Value>,
}

fn parse_json(text: &str, source_name: &str) -> Result<Vec<REInstance>> {
    let err = |record: usize, message: String| Error::Parse { source_name: source_name.to_string(), record, message };
    let items: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| err(0, e.to_string()))?;
    let mut out = Vec::new();
    for (i, item) in items.into_iter().enumerate() {
        let s: JsonSentence = serde_json::from_value(item).map_err(|e| err(i, e.to_string()))?;
        let sid = match &s.orig_id {
            Some(serde_json::Value::String(v)) => v.clone(),
            Some(v) => v.to_string(),
            None => i.to_string(),
        };
        let ents = s
            .entities
            .iter()
            .map(|e| {
                if e.end <= e.start {
                    return Err(err(i, format!("entity span {}..{} is empty", e.start, e.end)));
                }
                Ok(Entity { span: Span::new(e.start, e.end - 1), ty: e.ty.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, r) in s.relations.iter().enumerate() {
            let get = |j: usize| ents.get(j).ok_or_else(|| err(i, format!("relation refers to entity {j}")));
            let inst = instance(format!("{sid}-{k}"), &s.tokens, get(r.head)?, get(r.tail)?, &r.ty);
            inst.validate().map_err(|e| err(i, e.to_string()))?;
            out.push(inst);
        }
    }
    Ok(out)
}
