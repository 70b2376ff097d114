//! Tokens, segments, and token-level edit distance.
//!
//! Every lexical score in the crate is computed on token sequences, not on
//! characters. A segment is tokenized once when it is created and the token
//! sequence is what gets compared.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Stable identifier of a segment inside one collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u32);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for SegmentId {
    fn from(v: u32) -> Self {
        SegmentId(v)
    }
}

/// A non-empty surface form without internal whitespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(String);

impl Token {
    /// Returns `None` for empty strings or strings containing whitespace.
    pub fn new(surface: impl Into<String>) -> Option<Token> {
        let s = surface.into();
        if s.is_empty() || s.chars().any(char::is_whitespace) {
            None
        } else {
            Some(Token(s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerMode {
    /// Split on whitespace only.
    Whitespace,
    /// Split on whitespace, then emit every punctuation character as its own token.
    #[default]
    WhitespacePunct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenizerConfig {
    #[serde(default)]
    pub mode: TokenizerMode,
    /// Fold to lowercase before splitting. Matching is case-sensitive otherwise.
    #[serde(default)]
    pub lowercase: bool,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '«' | '»' | '¿' | '¡' | '„' | '“' | '”' | '‘' | '’' | '…' | '\u{2013}' | '\u{2014}' | '·' | '‹' | '›'
        )
        || ('\u{3000}'..='\u{303f}').contains(&c)
}

/// Splits `raw` into tokens.
///
/// Total and deterministic. With [`TokenizerMode::WhitespacePunct`] a
/// punctuation character always becomes a single-character token, so
/// `"Hello, world!"` yields `Hello , world !`. Joining the output with single
/// spaces and tokenizing again gives back the same sequence.
pub fn tokenize(raw: &str, config: &TokenizerConfig) -> Vec<Token> {
    let folded;
    let text = if config.lowercase {
        folded = raw.to_lowercase();
        folded.as_str()
    } else {
        raw
    };

    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        match config.mode {
            TokenizerMode::Whitespace => out.push(Token(chunk.to_owned())),
            TokenizerMode::WhitespacePunct => {
                let mut start = None;
                for (i, c) in chunk.char_indices() {
                    if is_punct(c) {
                        if let Some(s) = start.take() {
                            out.push(Token(chunk[s..i].to_owned()));
                        }
                        out.push(Token(c.to_string()));
                    } else if start.is_none() {
                        start = Some(i);
                    }
                }
                if let Some(s) = start {
                    out.push(Token(chunk[s..].to_owned()));
                }
            }
        }
    }
    out
}

/// Joins tokens with single spaces.
pub fn detokenize(tokens: &[Token]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(t.as_str());
    }
    s
}

/// A tokenized sentence, the unit of retrieval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub id: SegmentId,
    pub lang: String,
    pub raw: String,
    pub tokens: Vec<Token>,
}

impl Segment {
    pub fn new(
        id: impl Into<SegmentId>,
        lang: impl Into<String>,
        raw: impl Into<String>,
        config: &TokenizerConfig,
    ) -> Segment {
        let raw = raw.into();
        let tokens = tokenize(&raw, config);
        Segment {
            id: id.into(),
            lang: lang.into(),
            raw,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Minimum number of element insertions, deletions and substitutions
/// turning `a` into `b`.
///
/// Two-row dynamic program, `O(|a|·|b|)` time and `O(min(|a|,|b|))` space.
pub fn levenshtein_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }

    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut curr = vec![0usize; short.len() + 1];
    for (i, lc) in long.iter().enumerate() {
        curr[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lc != sc);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

/// `1 - Δ(a, b) / max(|a|, |b|)`, in `[0, 1]`.
///
/// Two empty sequences are identical and score `1.0`.
pub fn levenshtein_similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein_distance(a, b) as f64 / longest as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<Token> {
        tokenize(s, &TokenizerConfig::default())
    }

    fn strs(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(Token::as_str).collect()
    }

    // Plain recursion over the three edit operations; exponential, only for short inputs.
    fn naive_distance(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                if x == y {
                    naive_distance(ra, rb)
                } else {
                    1 + naive_distance(ra, b)
                        .min(naive_distance(a, rb))
                        .min(naive_distance(ra, rb))
                }
            }
        }
    }

    #[test]
    fn tokenize_examples() {
        assert!(toks("").is_empty());
        assert_eq!(strs(&toks("Hello, world!")), ["Hello", ",", "world", "!"]);
        assert_eq!(strs(&toks("a a a")), ["a", "a", "a"]);
        assert_eq!(strs(&toks("  l'homme...  ")), ["l", "'", "homme", ".", ".", "."]);
        assert_eq!(strs(&toks("«Oui»")), ["«", "Oui", "»"]);
    }

    #[test]
    fn tokenize_modes() {
        let ws = TokenizerConfig {
            mode: TokenizerMode::Whitespace,
            lowercase: false,
        };
        assert_eq!(strs(&tokenize("Hello, world!", &ws)), ["Hello,", "world!"]);
        let lower = TokenizerConfig {
            mode: TokenizerMode::WhitespacePunct,
            lowercase: true,
        };
        assert_eq!(strs(&tokenize("Hello World", &lower)), ["hello", "world"]);
    }

    #[test]
    fn token_rejects_whitespace() {
        assert!(Token::new("").is_none());
        assert!(Token::new("a b").is_none());
        assert_eq!(Token::new("ab").unwrap().as_str(), "ab");
    }

    #[test]
    fn distance_examples() {
        let empty: [&str; 0] = [];
        assert_eq!(levenshtein_distance(&empty, &empty), 0);
        assert_eq!(levenshtein_distance(&["a", "b", "c"], &["a", "b", "c"]), 0);
        assert_eq!(levenshtein_distance(&["a", "b", "c"], &["a", "x", "c"]), 1);
        assert_eq!(levenshtein_distance(&["a", "b"], &empty), 2);
    }

    #[test]
    fn similarity_examples() {
        let empty: [&str; 0] = [];
        assert_eq!(levenshtein_similarity(&["a", "b", "c"], &["a", "b", "c"]), 1.0);
        assert_eq!(levenshtein_similarity(&empty, &["a", "b"]), 0.0);
        assert_eq!(levenshtein_similarity(&empty, &empty), 1.0);
        let s = levenshtein_similarity(&["a", "b", "c"], &["a", "x", "c"]);
        assert!((s - 2.0 / 3.0).abs() < 1e-9);
        assert!((s - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn dp_matches_naive_exhaustively_up_to_five() {
        fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
            let mut out = vec![vec![]];
            let mut frontier = vec![vec![]];
            for _ in 0..max_len {
                let mut next = Vec::new();
                for s in &frontier {
                    for c in 0..alphabet {
                        let mut t: Vec<u8> = s.clone();
                        t.push(c);
                        next.push(t);
                    }
                }
                out.extend(next.iter().cloned());
                frontier = next;
            }
            out
        }
        let seqs = all_sequences(4, 3);
        for a in &seqs {
            for b in &seqs {
                assert_eq!(levenshtein_distance(a, b), naive_distance(a, b), "{a:?} {b:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn dp_matches_naive_sampled(
            a in prop::collection::vec(0u8..3, 0..=8),
            b in prop::collection::vec(0u8..3, 0..=8),
        ) {
            prop_assert_eq!(levenshtein_distance(&a, &b), naive_distance(&a, &b));
        }

        #[test]
        fn metric_properties(
            a in prop::collection::vec(0u8..5, 0..=12),
            b in prop::collection::vec(0u8..5, 0..=12),
            c in prop::collection::vec(0u8..5, 0..=12),
        ) {
            let ab = levenshtein_distance(&a, &b);
            prop_assert_eq!(ab, levenshtein_distance(&b, &a));
            prop_assert!(levenshtein_distance(&a, &c) <= ab + levenshtein_distance(&b, &c));
            prop_assert!(a.len().abs_diff(b.len()) <= ab);
            prop_assert!(ab <= a.len().max(b.len()));

            let s = levenshtein_similarity(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            if !a.is_empty() {
                prop_assert_eq!(levenshtein_similarity(&a, &a), 1.0);
            }
        }

        #[test]
        fn retokenizing_joined_tokens_is_stable(raw in "[a-zA-Z0-9 ,.!?'\"-]{0,40}") {
            let cfg = TokenizerConfig::default();
            let once = tokenize(&raw, &cfg);
            let twice = tokenize(&detokenize(&once), &cfg);
            prop_assert_eq!(once, twice);
        }
    }
}
