use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Token ids 0..=4 are reserved and fixed.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<mask>"];

/// Dense token <-> id map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from raw texts. Words seen fewer than `min_count` times map to
    /// UNK; ordering is by descending frequency, then lexicographic.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix is present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Lowercase, split on whitespace and punctuation (punctuation dropped).
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation() || is_unicode_punct(c))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2000}'..='\u{206F}' | '\u{3000}'..='\u{303F}' | '\u{FF01}'..='\u{FF0F}' | '\u{FF1A}'..='\u{FF20}')
}

/// Token ids truncated and PAD-padded to exactly `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = split_words(text)
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w))
        .collect();
    ids.resize(max_len, PAD);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_short_text() {
        let v = Vocabulary::build(["how old are you"], 1);
        let ids = tokenize("How old", &v, 5);
        assert_eq!(ids, vec![v.id("how"), v.id("old"), PAD, PAD, PAD]);
        assert_ne!(v.id("how"), UNK);
    }

    #[test]
    fn truncates_to_max_len() {
        let text: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
        let text = text.join(" ");
        let v = Vocabulary::build([text.as_str()], 1);
        let ids = tokenize(&text, &v, 50);
        assert_eq!(ids.len(), 50);
        assert_eq!(ids[49], v.id("w49"));
        assert!(ids.iter().all(|&i| i != PAD));
    }

    #[test]
    fn unseen_word_is_unk() {
        let v = Vocabulary::build(["a b"], 1);
        assert_eq!(tokenize("zebra", &v, 2), vec![UNK, PAD]);
    }

    #[test]
    fn punctuation_splits_and_lowercases() {
        assert_eq!(split_words("What's UP?now"), vec!["what", "s", "up", "now"]);
    }

    #[test]
    fn reserved_ids_fixed_and_dense() {
        let v = Vocabulary::build(["b a a"], 1);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(MASK), Some("<mask>"));
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.len(), 7);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }
}
