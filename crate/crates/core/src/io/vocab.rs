//! Word-level vocabulary with five reserved control tokens.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const STOP_ID: u32 = 2;
pub const DELIM_ID: u32 = 3;
pub const UNK_ID: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<stop>", "<delim>", "<unk>"];

/// Lowercase whitespace tokenization, shared by vocabulary building,
/// training targets, and ROUGE scoring.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    min_frequency: u32,
    /// Token to id, reserved tokens included. BTreeMap keeps serialization
    /// byte-stable.
    tokens: BTreeMap<String, u32>,
}

impl Vocab {
    /// Build from a corpus of texts; tokens below `min_frequency` fall to
    /// `<unk>`. Ids are assigned densely after the reserved block, most
    /// frequent first, ties broken lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_frequency: u32) -> Result<Self> {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut saw_any = false;
        for text in corpus {
            saw_any = true;
            for tok in tokenize(text) {
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(Error::Contract("vocabulary corpus is empty".into()));
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_frequency as u64)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_token_list(
            kept.into_iter().map(|(t, _)| t),
            min_frequency,
        ))
    }

    /// Build with an explicit, ordered token list after the reserved block.
    pub fn from_token_list(tokens: impl IntoIterator<Item = String>, min_frequency: u32) -> Self {
        let mut map = BTreeMap::new();
        for (i, tok) in RESERVED.iter().enumerate() {
            map.insert((*tok).to_owned(), i as u32);
        }
        let mut next = RESERVED.len() as u32;
        for tok in tokens {
            if !map.contains_key(&tok) {
                map.insert(tok, next);
                next += 1;
            }
        }
        Vocab {
            min_frequency,
            tokens: map,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> u32 {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> u32 {
        self.tokens.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
            .unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Vocab =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        for (i, tok) in RESERVED.iter().enumerate() {
            if vocab.tokens.get(*tok) != Some(&(i as u32)) {
                return Err(Error::format(
                    path,
                    format!("reserved token {tok} must have id {i}"),
                ));
            }
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_maps_rare_tokens_to_unk() {
        let vocab = Vocab::build(["a a b"], 2).unwrap();
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
        assert_eq!(vocab.encode("a b"), vec![vocab.id("a"), UNK_ID]);
    }

    #[test]
    fn empty_text_encodes_to_empty() {
        let vocab = Vocab::build(["a"], 1).unwrap();
        assert!(vocab.encode("").is_empty());
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn empty_corpus_is_contract_error() {
        assert!(Vocab::build(std::iter::empty::<&str>(), 1).is_err());
    }

    #[test]
    fn reserved_tokens_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let vocab = Vocab::build(["hello world hello"], 1).unwrap();
        vocab.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        for (i, tok) in RESERVED.iter().enumerate() {
            assert_eq!(back.id(tok), i as u32);
        }
        assert_eq!(back.id("hello"), vocab.id("hello"));
        back.save(dir.path().join("vocab2.json")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("vocab.json")).unwrap(),
            std::fs::read(dir.path().join("vocab2.json")).unwrap(),
        );
    }

    #[test]
    fn ids_are_dense_and_frequency_ordered() {
        let vocab = Vocab::build(["c c c b b a"], 1).unwrap();
        assert_eq!(vocab.id("c"), 5);
        assert_eq!(vocab.id("b"), 6);
        assert_eq!(vocab.id("a"), 7);
        assert_eq!(vocab.len(), 8);
    }

    #[test]
    fn tokenizing_lowercases() {
        assert_eq!(tokenize("The CAT  sat"), vec!["the", "cat", "sat"]);
    }
}
