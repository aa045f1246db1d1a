use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[pad]";
pub const UNK: &str = "[unk]";
pub const MASK: &str = "MASK";
pub const EOS: &str = "[eos]";
pub const SEP: &str = "[sep]";
pub const SUBJ_OPEN: &str = "[e11]";
pub const SUBJ_CLOSE: &str = "[e12]";
pub const OBJ_OPEN: &str = "[e21]";
pub const OBJ_CLOSE: &str = "[e22]";
/// Separators: subject type start/end, object type start/end, object surface end.
pub const SEPARATORS: [&str; 5] = ["+", "*", "#", "&", "@"];
pub const MARKERS: [&str; 4] = [SUBJ_OPEN, SUBJ_CLOSE, OBJ_OPEN, OBJ_CLOSE];

const RESERVED: [&str; 14] =
    [PAD, UNK, MASK, EOS, SEP, SUBJ_OPEN, SUBJ_CLOSE, OBJ_OPEN, OBJ_CLOSE, "+", "*", "#", "&", "@"];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const SEP_ID: usize = 4;

pub fn is_marker(token: &str) -> bool {
    MARKERS.contains(&token)
}

pub fn is_separator(token: &str) -> bool {
    SEPARATORS.contains(&token)
}

fn relation_token(index: usize) -> String {
    format!("[rel_{index}]")
}

/// Token ↔ id map with dense ids. Reserved tokens come first, then one
/// token per relation, then corpus words in sorted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    n_relations: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    n_relations: usize,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let index = r.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: r.tokens, index, n_relations: r.n_relations }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.tokens, n_relations: v.n_relations }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// Set when the input exceeded the maximum length and was cut.
    pub truncated: bool,
}

impl Vocabulary {
    pub fn build<'a>(n_relations: usize, words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..n_relations).map(relation_token));
        let taken: BTreeSet<String> = tokens.iter().cloned().collect();
        let words: BTreeSet<&str> = words.into_iter().filter(|w| !taken.contains(*w)).collect();
        tokens.extend(words.into_iter().map(str::to_string));
        VocabRepr { tokens, n_relations }.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of the decoder token standing for relation `index`.
    pub fn relation_id(&self, index: usize) -> Result<usize> {
        if index >= self.n_relations {
            return Err(Error::Index(format!("relation {index} of {}", self.n_relations)));
        }
        Ok(RESERVED.len() + index)
    }

    /// Inverse of [`Self::relation_id`].
    pub fn relation_index(&self, id: usize) -> Option<usize> {
        (RESERVED.len()..RESERVED.len() + self.n_relations).contains(&id).then(|| id - RESERVED.len())
    }

    /// Whitespace tokenization; markers and separators map to their reserved
    /// ids, unknown words to the UNK id.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Tokenized> {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.tokenize_words(&words, max_len)
    }

    pub fn tokenize_words<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Result<Tokenized> {
        if words.is_empty() {
            return Err(Error::Empty("nothing to tokenize".into()));
        }
        let truncated = words.len() > max_len;
        let ids = words.iter().take(max_len).map(|w| self.id(w.as_ref())).collect();
        Ok(Tokenized { ids, truncated })
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }
}
