//! Label prompt templates, tokenization and description refinement.

pub mod lexicon;
mod refine;
mod tokenizer;

use crate::error::{Error, Result};

pub use lexicon::{EmotionLexicon, EMOTION_WORDS};
pub use refine::{refine_description, RefinementReport, FALLBACK_DESCRIPTION};
pub use tokenizer::{
    build_vocab, detokenize, normalize_words, tokenize, TokenSequence, Vocabulary,
    DESCRIPTION_MAX_LEN, END_ID, LABEL_MAX_LEN, PAD_ID, START_ID, UNK_ID,
};

pub const DEFAULT_NEGATION: &str = "no";

/// Builds the positive and negative label prompt for every class, in class
/// order:
///
/// * `A person with an expression of {name}.`
/// * `A person with an expression of {negation} {name}.`
pub fn expand_pn_templates(class_names: &[String], negation: &str) -> Result<(Vec<String>, Vec<String>)> {
    if class_names.is_empty() {
        return Err(Error::Invalid("no class names given".into()));
    }
    if negation.trim().is_empty() {
        return Err(Error::Config("negation word must be non-blank".into()));
    }
    let neg = negation.trim();
    let mut pos = Vec::with_capacity(class_names.len());
    let mut negs = Vec::with_capacity(class_names.len());
    for (i, name) in class_names.iter().enumerate() {
        let name = name.trim();
        if name.is_empty() {
            return Err(Error::Invalid(format!("class name {i} is blank")));
        }
        pos.push(format!("A person with an expression of {name}."));
        negs.push(format!("A person with an expression of {neg} {name}."));
    }
    Ok((pos, negs))
}
