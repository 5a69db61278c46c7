//! Two-stage rule-based removal of emotion leakage from descriptions.
//!
//! Stage 1 drops every sentence that names an emotion directly, outside any
//! inference-cue clause. Stage 2 cuts each remaining cue clause, from the cue
//! phrase to the end of its sentence.

use serde::{Deserialize, Serialize};

use super::lexicon::EmotionLexicon;

pub const FALLBACK_DESCRIPTION: &str = "facial features change across frames";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub sentences_in: usize,
    pub sentences_out: usize,
    /// Sentences dropped by the direct-word rule.
    pub direct_removed: usize,
    /// Cue clauses cut by the indirect rule.
    pub cue_clauses_removed: usize,
    /// Sentences that became empty after their cue clause was cut.
    pub cue_sentences_removed: usize,
    pub fallback: bool,
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text. Each
/// piece keeps its terminator.
fn sentences(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace()) {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn split_terminator(s: &str) -> (&str, Option<char>) {
    match s.chars().last() {
        Some(c @ ('.' | '!' | '?')) => (&s[..s.len() - 1], Some(c)),
        _ => (s, None),
    }
}

pub fn refine_description(text: &str, lexicon: &EmotionLexicon) -> (String, RefinementReport) {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let all = sentences(&collapsed);
    let mut report = RefinementReport {
        sentences_in: all.len(),
        ..RefinementReport::default()
    };

    // (body, terminator, whether a cue clause was cut)
    let mut kept: Vec<(String, Option<char>, bool)> = Vec::new();
    for s in all {
        let (body, term) = split_terminator(s);
        let cue_at = lexicon.cue_regex().find(body).map(|m| m.start());
        let head = &body[..cue_at.unwrap_or(body.len())];
        if lexicon.direct_regex().is_match(head) {
            report.direct_removed += 1;
            continue;
        }
        if cue_at.is_some() {
            report.cue_clauses_removed += 1;
            let cut = head.trim_end_matches(|c: char| c.is_whitespace() || matches!(c, ',' | ';' | ':'));
            if cut.is_empty() {
                report.cue_sentences_removed += 1;
                continue;
            }
            kept.push((cut.to_string(), term, true));
        } else {
            kept.push((body.to_string(), term, false));
        }
    }

    report.sentences_out = kept.len();
    if kept.is_empty() {
        report.fallback = true;
        return (FALLBACK_DESCRIPTION.to_string(), report);
    }
    let n = kept.len();
    let mut out = String::new();
    for (i, (body, term, cut)) in kept.into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&body);
        // A clause cut from the final sentence leaves it unterminated.
        if let Some(t) = term {
            if i + 1 < n || !cut {
                out.push(t);
            }
        }
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> EmotionLexicon {
        EmotionLexicon::default()
    }

    #[test]
    fn indirect_clause_is_cut() {
        let (out, r) = refine_description(
            "The man's mouth is slightly ajar, showing his teeth, and his eyes are narrowed, \
             suggesting a feeling of joy or amusement.",
            &lex(),
        );
        assert_eq!(
            out,
            "The man's mouth is slightly ajar, showing his teeth, and his eyes are narrowed"
        );
        assert_eq!((r.cue_clauses_removed, r.direct_removed, r.fallback), (1, 0, false));
    }

    #[test]
    fn direct_sentence_falls_back() {
        let (out, r) = refine_description("The man in the video wears a sad expression.", &lex());
        assert_eq!(out, FALLBACK_DESCRIPTION);
        assert!(r.fallback);
        assert_eq!(r.direct_removed, 1);
    }

    #[test]
    fn clean_text_is_unchanged() {
        let t = "The brows rise gradually across frames. The head stays mostly still.";
        let (out, r) = refine_description(t, &lex());
        assert_eq!(out, t);
        assert_eq!(r.direct_removed + r.cue_clauses_removed, 0);
        assert_eq!((r.sentences_in, r.sentences_out), (2, 2));
    }

    #[test]
    fn mixed_text_keeps_neutral_sentences() {
        let t = "The cheeks lift, indicating delight. She looks happy! The jaw drops.";
        let (out, r) = refine_description(t, &lex());
        assert_eq!(out, "The cheeks lift. The jaw drops.");
        assert_eq!((r.direct_removed, r.cue_clauses_removed), (1, 1));
    }

    #[test]
    fn sentence_starting_with_cue_is_dropped() {
        let (out, r) = refine_description("Conveying fear. The lips part.", &lex());
        assert_eq!(out, "The lips part.");
        assert_eq!(r.cue_sentences_removed, 1);
    }

    #[test]
    fn decimals_do_not_split_sentences() {
        assert_eq!(sentences("Ratio 0.5 holds. Next"), vec!["Ratio 0.5 holds.", "Next"]);
    }

    const WORDS: [&str; 14] = [
        "the", "brows", "rise", "happy", "suggesting", "joy", "which", "suggests", "calm", "lips",
        "and", "fear", "move", "slowly",
    ];
    const PUNCT: [&str; 5] = ["", "", ",", ".", "!"];

    fn text_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec((0..WORDS.len(), 0..PUNCT.len()), 1..30).prop_map(|v| {
            v.into_iter()
                .map(|(w, p)| format!("{}{}", WORDS[w], PUNCT[p]))
                .collect::<Vec<_>>()
                .join(" ")
        })
    }

    proptest! {
        #[test]
        fn refined_text_has_no_leakage(t in text_strategy()) {
            let lex = lex();
            let (out, _) = refine_description(&t, &lex);
            prop_assert!(!lex.has_hit(&out), "{t:?} -> {out:?}");
            prop_assert!(!out.trim().is_empty());
        }

        #[test]
        fn refinement_is_idempotent(t in text_strategy()) {
            let lex = lex();
            let (once, _) = refine_description(&t, &lex);
            let (twice, r) = refine_description(&once, &lex);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(r.direct_removed + r.cue_clauses_removed, 0);
        }
    }
}
