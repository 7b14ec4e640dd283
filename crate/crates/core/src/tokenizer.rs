//! Token counting and prefix truncation.
//!
//! Two tokenizers ship with the crate. [`ReferenceTokenizer`] is a small,
//! fully specified sub-word scheme used by the mock backends and the test
//! fixtures. [`CharBudget`] is the fallback used when a backend offers no
//! tokenizer: every three characters count as one token.

use std::ops::Range;

/// Characters per token assumed by the [`CharBudget`] fallback.
pub const CHARS_PER_TOKEN: usize = 3;

/// A tokenizer that can locate token boundaries inside a string.
///
/// Tokens must tile the input: spans are contiguous, non-overlapping and
/// cover every byte. That makes prefix truncation exact: the first `n`
/// tokens of a text re-tokenize to exactly `n` tokens.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    fn spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }

    /// Longest prefix of `text` holding at most `budget` tokens.
    fn truncate<'a>(&self, text: &'a str, budget: usize) -> &'a str {
        let spans = self.spans(text);
        if spans.len() <= budget {
            return text;
        }
        if budget == 0 {
            return "";
        }
        &text[..spans[budget - 1].end]
    }

    fn first_token<'a>(&self, text: &'a str) -> Option<&'a str> {
        self.spans(text).first().map(|r| &text[r.clone()])
    }
}

/// Deterministic reference tokenizer.
///
/// Rules, applied left to right:
/// - a run of ASCII letters is split into chunks of at most four letters;
/// - a run of whitespace is a single token;
/// - every other character (digits, punctuation, non-ASCII) is its own token.
///
/// Under these rules `"Highest"` tokenizes as `["High", "est"]`, so its first
/// token collides with `"High"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceTokenizer;

const LETTER_CHUNK: usize = 4;

impl Tokenizer for ReferenceTokenizer {
    fn name(&self) -> &str {
        "reference-v1"
    }

    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let bytes = text.as_bytes();
        let mut spans = Vec::with_capacity(text.len() / 2);
        let mut i = 0;
        while i < bytes.len() {
            let b = bytes[i];
            if b.is_ascii_alphabetic() {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                    i += 1;
                }
                let mut s = start;
                while s < i {
                    let e = (s + LETTER_CHUNK).min(i);
                    spans.push(s..e);
                    s = e;
                }
            } else {
                let c = text[i..].chars().next().expect("index on char boundary");
                if c.is_whitespace() {
                    let start = i;
                    for ch in text[i..].chars() {
                        if !ch.is_whitespace() {
                            break;
                        }
                        i += ch.len_utf8();
                    }
                    spans.push(start..i);
                } else {
                    spans.push(i..i + c.len_utf8());
                    i += c.len_utf8();
                }
            }
        }
        spans
    }
}

/// Fallback budget: one token per [`CHARS_PER_TOKEN`] characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharBudget;

impl Tokenizer for CharBudget {
    fn name(&self) -> &str {
        "char-budget-3"
    }

    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = 0;
        let mut n = 0;
        for (idx, ch) in text.char_indices() {
            n += 1;
            if n == CHARS_PER_TOKEN {
                spans.push(start..idx + ch.len_utf8());
                start = idx + ch.len_utf8();
                n = 0;
            }
        }
        if start < text.len() {
            spans.push(start..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(CHARS_PER_TOKEN)
    }

    fn truncate<'a>(&self, text: &'a str, budget: usize) -> &'a str {
        let limit = budget.saturating_mul(CHARS_PER_TOKEN);
        match text.char_indices().nth(limit) {
            Some((idx, _)) => &text[..idx],
            None => text,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tokens<'a>(t: &dyn Tokenizer, s: &'a str) -> Vec<&'a str> {
        t.spans(s).into_iter().map(|r| &s[r]).collect()
    }

    #[test]
    fn reference_splits_letters_into_chunks() {
        let t = ReferenceTokenizer;
        assert_eq!(tokens(&t, "Highest"), vec!["High", "est"]);
        assert_eq!(tokens(&t, "Not Relevant"), vec!["Not", " ", "Rele", "vant"]);
        assert_eq!(tokens(&t, "a12, b"), vec!["a", "1", "2", ",", " ", "b"]);
        assert_eq!(tokens(&t, "肺癌  x"), vec!["肺", "癌", "  ", "x"]);
        assert_eq!(t.first_token("High"), t.first_token("Highest"));
        assert_ne!(t.first_token("Top"), t.first_token("Low"));
    }

    #[test]
    fn char_budget_counts_thirds() {
        let t = CharBudget;
        assert_eq!(t.count(""), 0);
        assert_eq!(t.count("abcd"), 2);
        assert_eq!(t.truncate("abcdefgh", 2), "abcdef");
        assert_eq!(t.truncate("肺癌肺癌", 1), "肺癌肺");
        assert_eq!(t.spans("abcdefg").len(), t.count("abcdefg"));
    }

    proptest! {
        #[test]
        fn spans_tile_the_input(s in "\\PC{0,200}") {
            for t in [&ReferenceTokenizer as &dyn Tokenizer, &CharBudget] {
                let spans = t.spans(&s);
                let mut pos = 0;
                for r in &spans {
                    prop_assert_eq!(r.start, pos);
                    prop_assert!(r.end > r.start);
                    pos = r.end;
                }
                prop_assert_eq!(pos, s.len());
            }
        }

        #[test]
        fn truncation_is_an_exact_prefix(s in "[a-zA-Z ,.0-9\\n肺]{0,300}", budget in 1usize..80) {
            for t in [&ReferenceTokenizer as &dyn Tokenizer, &CharBudget] {
                let cut = t.truncate(&s, budget);
                prop_assert!(s.starts_with(cut));
                let n = t.count(cut);
                prop_assert!(n <= budget);
                if t.count(&s) >= budget {
                    prop_assert_eq!(n, budget);
                }
            }
        }
    }
}
