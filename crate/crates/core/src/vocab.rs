//! Tokenization and the shared vocabulary.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// The deletion placeholder that replaces masked tokens.
pub const MASK: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "★", "<s>", "</s>"];
pub const MASK_TOKEN: &str = "★";

/// Lowercases, splits on whitespace, and detaches every character that is
/// not alphanumeric as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from token lists: reserved entries first, then every token with
    /// count `>= min_count`, by descending count and then lexicographically.
    pub fn build<'a, I>(sequences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(kept.into_iter().map(|(t, _)| t.to_string()))
                .collect(),
        )
    }

    /// Rebuilds from a full listing (reserved tokens included), e.g. from a
    /// checkpoint.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        assert_eq!(
            tokenize("Rio 2, was released."),
            toks(&["rio", "2", ",", "was", "released", "."])
        );
        assert_eq!(tokenize("  "), Vec::<String>::new());
        assert_eq!(tokenize("a ★ b"), toks(&["a", "★", "b"]));
    }

    #[test]
    fn vocab_orders_by_count_then_lexicographic() {
        let seqs = [toks(&["b", "a", "c", "b"]), toks(&["c", "d"])];
        let v = Vocab::build(seqs.iter().map(|s| s.as_slice()), 1);
        assert_eq!(&v.tokens()[5..], &toks(&["b", "c", "a", "d"])[..]);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.id("★"), MASK);
    }

    #[test]
    fn high_min_count_leaves_only_reserved() {
        let seqs = [toks(&["b", "a", "b"])];
        let v = Vocab::build(seqs.iter().map(|s| s.as_slice()), 3);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let seqs = [toks(&["x", "y", "z", "y", "x"]), toks(&["w"])];
        let a = Vocab::build(seqs.iter().map(|s| s.as_slice()), 1);
        let b = Vocab::build(seqs.iter().map(|s| s.as_slice()), 1);
        assert_eq!(a, b);
    }
}
