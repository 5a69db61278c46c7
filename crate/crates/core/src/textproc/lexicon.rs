//! Emotion word lists and the compiled matchers used by refinement.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(noun, adjective)` per basic expression, in default class order.
pub const EMOTION_WORDS: [(&str, &str); 7] = [
    ("happiness", "happy"),
    ("sadness", "sad"),
    ("neutrality", "neutral"),
    ("anger", "angry"),
    ("surprise", "surprised"),
    ("disgust", "disgusted"),
    ("fear", "afraid"),
];

const SYNONYMS: [&str; 38] = [
    "joy", "joyful", "amusement", "amused", "cheerful", "glad", "delight", "delighted",
    "pleased", "sorrow", "sorrowful", "unhappy", "grief", "upset", "melancholy", "mad",
    "furious", "rage", "irritated", "annoyed", "astonished", "astonishment", "shocked",
    "amazed", "revulsion", "repulsed", "contempt", "scared", "fearful", "frightened",
    "terrified", "anxious", "nervous", "emotionless", "expressionless", "indifferent",
    "fright", "dread",
];

const CUE_PATTERNS: [&str; 6] = [
    "suggesting",
    "indicating",
    "implying",
    "which suggests",
    "conveying",
    "as if feeling",
];

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    direct_words: Vec<String>,
    cue_patterns: Vec<String>,
}

/// Direct emotion words plus inference-cue phrases, matched
/// case-insensitively on word boundaries.
#[derive(Clone, Debug)]
pub struct EmotionLexicon {
    direct_words: BTreeSet<String>,
    cue_patterns: BTreeSet<String>,
    direct_re: Regex,
    cue_re: Regex,
}

fn phrase_regex(items: &BTreeSet<String>) -> Result<Regex> {
    // Longest first so that alternation prefers the full phrase.
    let mut v: Vec<&String> = items.iter().collect();
    v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let alts: Vec<String> = v
        .iter()
        .map(|p| {
            p.split_whitespace()
                .map(regex::escape)
                .collect::<Vec<_>>()
                .join(r"\s+")
        })
        .collect();
    RegexBuilder::new(&format!(r"\b(?:{})\b", alts.join("|")))
        .case_insensitive(true)
        .build()
        .map_err(|e| Error::Config(format!("lexicon pattern: {e}")))
}

fn normalize_set(items: impl IntoIterator<Item = String>, what: &str) -> Result<BTreeSet<String>> {
    let set: BTreeSet<String> = items
        .into_iter()
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .filter(|s| !s.is_empty())
        .collect();
    if set.is_empty() {
        return Err(Error::Config(format!("lexicon {what} must be non-empty")));
    }
    Ok(set)
}

impl EmotionLexicon {
    pub fn new(
        direct_words: impl IntoIterator<Item = String>,
        cue_patterns: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let direct_words = normalize_set(direct_words, "direct_words")?;
        let cue_patterns = normalize_set(cue_patterns, "cue_patterns")?;
        Ok(EmotionLexicon {
            direct_re: phrase_regex(&direct_words)?,
            cue_re: phrase_regex(&cue_patterns)?,
            direct_words,
            cue_patterns,
        })
    }

    /// Reads `{"direct_words": [...], "cue_patterns": [...]}`.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: LexiconFile = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            field: "lexicon".into(),
            reason: e.to_string(),
        })?;
        Self::new(f.direct_words, f.cue_patterns)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LexiconFile {
            direct_words: self.direct_words.iter().cloned().collect(),
            cue_patterns: self.cue_patterns.iter().cloned().collect(),
        })?)
    }

    pub fn direct_words(&self) -> &BTreeSet<String> {
        &self.direct_words
    }

    pub fn cue_patterns(&self) -> &BTreeSet<String> {
        &self.cue_patterns
    }

    pub fn direct_regex(&self) -> &Regex {
        &self.direct_re
    }

    pub fn cue_regex(&self) -> &Regex {
        &self.cue_re
    }

    /// True if any direct word or cue phrase occurs in `text`.
    pub fn has_hit(&self, text: &str) -> bool {
        self.direct_re.is_match(text) || self.cue_re.is_match(text)
    }
}

impl Default for EmotionLexicon {
    fn default() -> Self {
        let direct = EMOTION_WORDS
            .iter()
            .flat_map(|(n, a)| [n.to_string(), a.to_string()])
            .chain(SYNONYMS.iter().map(|s| s.to_string()));
        EmotionLexicon::new(direct, CUE_PATTERNS.iter().map(|s| s.to_string()))
            .expect("built-in lexicon is valid")
    }
}
