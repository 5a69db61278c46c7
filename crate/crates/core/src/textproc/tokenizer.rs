//! Deterministic word-level tokenizer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const UNK_ID: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Token budget for label prompts.
pub const LABEL_MAX_LEN: usize = 20;
/// Token budget for fine-grained descriptions.
pub const DESCRIPTION_MAX_LEN: usize = 64;

/// Lowercases, maps every character outside `[a-z0-9']` to a space and
/// splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Token ↔ id table. Ids 0..4 are reserved; words follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> std::result::Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary token {t:?}"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
    let words: BTreeSet<String> = texts.into_iter().flat_map(normalize_words).collect();
    let tokens: Vec<String> = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
        .collect();
    Vocabulary::try_from(tokens).expect("sorted distinct words")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    /// Padded to `max_len`.
    pub ids: Vec<usize>,
    pub valid_len: usize,
    /// Index of the end marker; always `valid_len - 1`.
    pub terminal_pos: usize,
}

/// `[start, words…, end, pad…]`, truncating words so that the end marker
/// always fits.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be ≥ 3, got {max_len}")));
    }
    let words = normalize_words(text);
    if words.is_empty() {
        return Err(Error::Invalid(format!("text {text:?} is empty after normalization")));
    }
    let keep = words.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(START_ID);
    ids.extend(words[..keep].iter().map(|w| vocab.id(w)));
    ids.push(END_ID);
    let valid_len = ids.len();
    ids.resize(max_len, PAD_ID);
    Ok(TokenSequence {
        ids,
        valid_len,
        terminal_pos: valid_len - 1,
    })
}

/// Content tokens of `seq` joined by single spaces.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.ids[1..seq.terminal_pos]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_ids_and_sorted_words() {
        let v = build_vocab(["Zeta alpha", "beta, alpha!"]);
        assert_eq!(v.token(PAD_ID), Some("<pad>"));
        assert_eq!(v.token(UNK_ID), Some("<unk>"));
        assert_eq!(v.words(), ["alpha", "beta", "zeta"]);
        assert_eq!(v.id("alpha"), 4);
        assert_eq!(v.id("missing"), UNK_ID);
    }

    #[test]
    fn empty_text_is_an_error() {
        let v = build_vocab(["a"]);
        assert!(tokenize("", &v, 20).is_err());
        assert!(tokenize(" ,.; ", &v, 20).is_err());
        assert!(tokenize("a", &v, 2).is_err());
    }

    #[test]
    fn truncation_keeps_end_marker() {
        let text: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let text = text.join(" ");
        let v = build_vocab([text.as_str()]);
        let s = tokenize(&text, &v, 64).unwrap();
        assert_eq!(s.valid_len, 64);
        assert_eq!(s.terminal_pos, 63);
        assert_eq!(s.ids[63], END_ID);
        assert_eq!(v.token(s.ids[62]), Some("w61"));
    }

    #[test]
    fn apostrophes_survive_normalization() {
        assert_eq!(normalize_words("The man's EYES."), ["the", "man's", "eyes"]);
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = build_vocab(["one two"]);
        let j = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&j).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
    }

    proptest! {
        #[test]
        fn sequence_invariants(words in proptest::collection::vec("[a-z]{1,6}", 1..80), max_len in 3usize..70) {
            let text = words.join(" ");
            let v = build_vocab([text.as_str()]);
            let s = tokenize(&text, &v, max_len).unwrap();
            prop_assert_eq!(s.ids.len(), max_len);
            prop_assert_eq!(s.terminal_pos + 1, s.valid_len);
            prop_assert!(s.terminal_pos < max_len);
            prop_assert!(s.ids[s.valid_len..].iter().all(|&i| i == PAD_ID));
            if words.len() + 2 <= max_len {
                prop_assert_eq!(detokenize(&s, &v), text);
            }
        }
    }
}
