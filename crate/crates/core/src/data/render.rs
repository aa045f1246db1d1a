use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{REInstance, Span};
use crate::encoder::vocab::{MASK, OBJ_CLOSE, OBJ_OPEN, SUBJ_CLOSE, SUBJ_OPEN};
use crate::error::{Error, Result};

/// How entities appear in the sentence fed to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceConfigKind {
    /// Markers and entity type, surface form dropped.
    Abstract,
    /// Each entity replaced by a bare `MASK` token.
    Mask,
    /// Markers around the surface form, no type.
    Entities,
    /// Markers, type and surface form.
    Mix,
}

impl SentenceConfigKind {
    pub const ALL: [SentenceConfigKind; 4] = [Self::Abstract, Self::Mask, Self::Entities, Self::Mix];

    pub fn name(self) -> &'static str {
        match self {
            Self::Abstract => "abstract",
            Self::Mask => "mask",
            Self::Entities => "entities",
            Self::Mix => "mix",
        }
    }
}

impl fmt::Display for SentenceConfigKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SentenceConfigKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown sentence configuration {s:?}")))
    }
}

/// A rendered word sequence plus the positions needed downstream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub words: Vec<String>,
    /// Whole subject frame, markers included.
    pub subj_region: Span,
    pub obj_region: Span,
    /// Tokens that stand for the subject itself: the surface form when
    /// present, else the type token (Abstract) or the `MASK` token.
    pub subj_core: Span,
    pub obj_core: Span,
}

impl Rendered {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// True for positions inside either entity frame.
    pub fn entity_mask(&self) -> Vec<bool> {
        (0..self.words.len()).map(|i| self.subj_region.contains(i) || self.obj_region.contains(i)).collect()
    }
}

struct Frame {
    words: Vec<String>,
    /// Offset and length of the core tokens inside `words`.
    core: (usize, usize),
}

fn frame(kind: SentenceConfigKind, subject: bool, surface: &[String], ty: &str) -> Frame {
    let (open, close) = if subject { (SUBJ_OPEN, SUBJ_CLOSE) } else { (OBJ_OPEN, OBJ_CLOSE) };
    let (type_start, type_end) = if subject { ("+", "*") } else { ("#", "&") };
    let mut words: Vec<String> = Vec::with_capacity(surface.len() + 6);
    let core;
    match kind {
        SentenceConfigKind::Mask => {
            words.push(MASK.into());
            core = (0, 1);
        }
        SentenceConfigKind::Entities => {
            words.push(open.into());
            core = (1, surface.len());
            words.extend(surface.iter().cloned());
        }
        SentenceConfigKind::Abstract | SentenceConfigKind::Mix => {
            words.extend([open.to_string(), type_start.to_string(), ty.to_string(), type_end.to_string()]);
            if kind == SentenceConfigKind::Mix {
                core = (4, surface.len());
                words.extend(surface.iter().cloned());
            } else {
                core = (2, 1);
            }
        }
    }
    if kind != SentenceConfigKind::Mask {
        if !subject {
            words.push("@".into());
        }
        words.push(close.into());
    }
    Frame { words, core }
}

/// Renders an instance under a sentence configuration.
pub fn render(inst: &REInstance, kind: SentenceConfigKind) -> Rendered {
    let subj = frame(kind, true, inst.subject_words(), &inst.subj_type);
    let obj = frame(kind, false, inst.object_words(), &inst.obj_type);
    let mut words = Vec::with_capacity(inst.tokens.len() + 12);
    let place = |words: &mut Vec<String>, f: &Frame| {
        let start = words.len();
        words.extend(f.words.iter().cloned());
        (Span::new(start, words.len() - 1), Span::new(start + f.core.0, start + f.core.0 + f.core.1 - 1))
    };
    let mut regions = (Span::new(0, 0), Span::new(0, 0), Span::new(0, 0), Span::new(0, 0));
    let mut i = 0;
    while i < inst.tokens.len() {
        if i == inst.subj_span.start {
            let (r, c) = place(&mut words, &subj);
            regions.0 = r;
            regions.2 = c;
            i = inst.subj_span.end + 1;
        } else if i == inst.obj_span.start {
            let (r, c) = place(&mut words, &obj);
            regions.1 = r;
            regions.3 = c;
            i = inst.obj_span.end + 1;
        } else {
            words.push(inst.tokens[i].clone());
            i += 1;
        }
    }
    Rendered { words, subj_region: regions.0, obj_region: regions.1, subj_core: regions.2, obj_core: regions.3 }
}

/// Entity spans and types recovered from a Mix rendering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedMix {
    pub tokens: Vec<String>,
    pub subj_span: Span,
    pub obj_span: Span,
    pub subj_type: String,
    pub obj_type: String,
}

/// Inverse of [`render`] for [`SentenceConfigKind::Mix`].
pub fn parse_mix<S: AsRef<str>>(words: &[S]) -> Result<ParsedMix> {
    let bad = |msg: &str| Error::Parse { source_name: "mix rendering".into(), record: 0, message: msg.to_string() };
    let words: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
    let mut tokens = Vec::new();
    let mut found: [Option<(Span, String)>; 2] = [None, None];
    let mut i = 0;
    while i < words.len() {
        let slot = match words[i] {
            SUBJ_OPEN => 0,
            OBJ_OPEN => 1,
            w => {
                tokens.push(w.to_string());
                i += 1;
                continue;
            }
        };
        let (type_start, type_end, end_seq): (&str, &str, &[&str]) =
            if slot == 0 { ("+", "*", &[SUBJ_CLOSE]) } else { ("#", "&", &["@", OBJ_CLOSE]) };
        if words.get(i + 1) != Some(&type_start) || words.get(i + 3) != Some(&type_end) {
            return Err(bad("malformed type frame"));
        }
        let ty = words[i + 2].to_string();
        let mut j = i + 4;
        let start = tokens.len();
        while j < words.len() && words[j] != end_seq[0] {
            tokens.push(words[j].to_string());
            j += 1;
        }
        if tokens.len() == start || words.get(j..j + end_seq.len()) != Some(end_seq) {
            return Err(bad("unterminated entity"));
        }
        if found[slot].is_some() {
            return Err(bad("entity marked twice"));
        }
        found[slot] = Some((Span::new(start, tokens.len() - 1), ty));
        i = j + end_seq.len();
    }
    match found {
        [Some((subj_span, subj_type)), Some((obj_span, obj_type))] => {
            Ok(ParsedMix { tokens, subj_span, obj_span, subj_type, obj_type })
        }
        _ => Err(bad("missing entity")),
    }
}
