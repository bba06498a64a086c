//! Text normalization applied to both references and hypotheses before
//! scoring.
//!
//! The rules are a frozen subset of the usual English ASR normalizer so that
//! scores are reproducible:
//!
//! 1. bracketed annotations such as `[laughter]` are removed,
//! 2. text is lowercased,
//! 3. every character other than `a-z`, `0-9` and `'` becomes a space,
//! 4. an apostrophe survives only between two letters (`i'm`, not `'cause`),
//! 5. whitespace is collapsed and the result split into tokens.
//!
//! Numbers are not spelled out: `10` and `ten` stay distinct.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizedText {
    tokens: Vec<String>,
}

impl NormalizedText {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Tokens joined by single spaces.
    pub fn char_string(&self) -> String {
        self.tokens.join(" ")
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Remove every bracketed span (brackets included). Nested brackets are
/// removed as one span; an unmatched `[` removes the rest of the string.
pub fn strip_bracketed(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut depth = 0usize;
    for c in text.chars() {
        match c {
            '[' => {
                depth += 1;
                out.push(' ');
            }
            ']' if depth > 0 => depth -= 1,
            _ if depth > 0 => {}
            _ => out.push(c),
        }
    }
    collapse_whitespace(&out)
}

pub fn normalize(text: &str) -> NormalizedText {
    let lowered = strip_bracketed(text).to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();
    let is_letter = |c: Option<&char>| c.is_some_and(|c| c.is_ascii_lowercase());
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        let keep = match c {
            'a'..='z' | '0'..='9' => true,
            '\'' => i > 0 && is_letter(chars.get(i - 1)) && is_letter(chars.get(i + 1)),
            _ => false,
        };
        cleaned.push(if keep { c } else { ' ' });
    }
    NormalizedText { tokens: cleaned.split_whitespace().map(str::to_owned).collect() }
}

/// How [`scrub_repetitions`] treats token types whose count exceeds the limit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrubMode {
    /// Drop every occurrence of an over-limit token.
    #[default]
    RemoveAll,
    /// Collapse each run of more than `limit` consecutive copies to one copy.
    CollapseRuns,
}

pub const DEFAULT_REPETITION_LIMIT: usize = 10;

/// Remove hallucinated repetitions from model output. Counting is on
/// whitespace tokens and case-insensitive.
pub fn scrub_repetitions(text: &str, limit: usize) -> String {
    scrub_repetitions_with(text, limit, ScrubMode::RemoveAll)
}

pub fn scrub_repetitions_with(text: &str, limit: usize, mode: ScrubMode) -> String {
    assert!(limit >= 1, "repetition limit must be positive");
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let keys: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    match mode {
        ScrubMode::RemoveAll => {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for k in &keys {
                *counts.entry(k.as_str()).or_default() += 1;
            }
            tokens
                .iter()
                .zip(&keys)
                .filter(|(_, k)| counts[k.as_str()] <= limit)
                .map(|(t, _)| *t)
                .collect::<Vec<_>>()
                .join(" ")
        }
        ScrubMode::CollapseRuns => {
            let mut out: Vec<&str> = Vec::with_capacity(tokens.len());
            let mut i = 0;
            while i < tokens.len() {
                let mut j = i + 1;
                while j < tokens.len() && keys[j] == keys[i] {
                    j += 1;
                }
                if j - i > limit {
                    out.push(tokens[i]);
                } else {
                    out.extend_from_slice(&tokens[i..j]);
                }
                i = j;
            }
            out.join(" ")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        normalize(s).into_tokens()
    }

    #[test]
    fn strip_examples() {
        assert_eq!(strip_bracketed("Yeah. [unintelligible]."), "Yeah. .");
        assert_eq!(strip_bracketed("no brackets here"), "no brackets here");
        assert_eq!(strip_bracketed("[laughter] ok [x] go"), "ok go");
        assert_eq!(strip_bracketed("keep [this is cut"), "keep");
        assert_eq!(strip_bracketed("a [b [c] d] e"), "a e");
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(toks("Yeah. I know, I'm trying to--"), ["yeah", "i", "know", "i'm", "trying", "to"]);
        assert!(normalize("").is_empty());
        assert_eq!(toks("STOP—stop… stop!"), ["stop", "stop", "stop"]);
        assert_eq!(toks("expired like la-- December."), ["expired", "like", "la", "december"]);
        assert_eq!(toks("'cause the dogs' bowl"), ["cause", "the", "dogs", "bowl"]);
        assert_eq!(toks("Unit 10, [static] copy"), ["unit", "10", "copy"]);
    }

    #[test]
    fn scrub_examples() {
        let twelve = ["no"; 12].join(" ") + " stop";
        assert_eq!(scrub_repetitions(&twelve, 10), "stop");
        assert_eq!(scrub_repetitions("a b c", 10), "a b c");
        let ten = ["go"; 10].join(" ");
        assert_eq!(scrub_repetitions(&ten, 10), ten);
        let mixed = (0..11).map(|i| if i % 2 == 0 { "No" } else { "no" }).collect::<Vec<_>>().join(" ");
        assert_eq!(scrub_repetitions(&mixed, 10), "");
    }

    #[test]
    fn collapse_mode_keeps_one_copy_of_long_runs() {
        let text = format!("{} ok {}", ["no"; 12].join(" "), ["no"; 3].join(" "));
        assert_eq!(scrub_repetitions_with(&text, 10, ScrubMode::CollapseRuns), "no ok no no no");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,60}") {
            let once = normalize(&s);
            let twice = normalize(&once.char_string());
            prop_assert_eq!(&once, &twice);
            for t in once.tokens() {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(|c| c.is_whitespace() || c == '[' || c == ']' || c.is_uppercase()));
            }
        }

        #[test]
        fn strip_is_idempotent_and_shrinking(s in "[a-zA-Z \\[\\]\\.]{0,40}") {
            let once = strip_bracketed(&s);
            prop_assert!(once.len() <= s.len());
            prop_assert_eq!(strip_bracketed(&once), once);
        }

        #[test]
        fn scrub_output_is_sub_multiset(words in proptest::collection::vec("[ab]{1,2}", 0..40), limit in 1usize..6) {
            let text = words.join(" ");
            let out = scrub_repetitions(&text, limit);
            let mut pool: HashMap<&str, i64> = HashMap::new();
            for w in text.split_whitespace() { *pool.entry(w).or_default() += 1; }
            for w in out.split_whitespace() {
                let c = pool.get_mut(w).unwrap();
                *c -= 1;
                prop_assert!(*c >= 0);
            }
        }
    }
}
