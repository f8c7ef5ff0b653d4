//! Word-level vocabularies with reserved special tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Default sequence budget: ten words plus SOS/EOS framing.
pub const DEFAULT_MAX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// `[tokens.., EOS, PAD..]`
    Source,
    /// `[SOS, tokens.., EOS, PAD..]`
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_index: HashMap<String, usize>,
    index_to_token: Vec<String>,
}

impl Vocabulary {
    /// Specials plus every distinct token, ordered by descending frequency
    /// and then lexicographically.
    pub fn build<S: AsRef<str>>(sentences: &[S]) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::data("cannot build a vocabulary from zero sentences"));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s.as_ref().split_whitespace() {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut tokens: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(t))
            .collect();
        tokens.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(tokens.into_iter().map(|(t, _)| t.to_string()))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut index_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        index_to_token.extend(tokens);
        let mut token_to_index = HashMap::with_capacity(index_to_token.len());
        for (i, t) in index_to_token.iter().enumerate() {
            if token_to_index.insert(t.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            token_to_index,
            index_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_token.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.index_to_token
    }

    pub fn contains_sentence(&self, sentence: &str) -> bool {
        sentence
            .split_whitespace()
            .all(|t| self.index_of(t).is_some_and(|i| i > UNK))
    }

    /// One token per line in index order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.index_to_token {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIAL_TOKENS.len() || lines[..4] != SPECIAL_TOKENS {
            return Err(Error::data("vocabulary file must start with the four special tokens"));
        }
        Self::from_tokens(lines[4..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn encode(&self, sentence: &str, max_len: usize, role: Role) -> Result<EncodedSequence> {
        let tokens: Vec<&str> = sentence.split_whitespace().collect();
        if max_len < 2 || tokens.len() > max_len - 2 {
            return Err(Error::TooLong {
                tokens: tokens.len(),
                max_len,
            });
        }
        let mut indices = Vec::with_capacity(max_len);
        if role == Role::Target {
            indices.push(SOS);
        }
        indices.extend(tokens.iter().map(|t| self.index_of(t).unwrap_or(UNK)));
        indices.push(EOS);
        let true_length = indices.len();
        indices.resize(max_len, PAD);
        Ok(EncodedSequence {
            indices,
            true_length,
        })
    }

    pub fn decode(&self, seq: &EncodedSequence) -> Result<String> {
        self.decode_indices(&seq.indices)
    }

    /// Join the non-special tokens of `indices` with single spaces.
    pub fn decode_indices(&self, indices: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &i in indices {
            let tok = self.token(i).ok_or(Error::Index {
                index: i,
                size: self.len(),
            })?;
            if i > UNK {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub indices: Vec<usize>,
    pub true_length: usize,
}

impl EncodedSequence {
    pub fn new(indices: Vec<usize>, true_length: usize) -> Result<Self> {
        if true_length > indices.len() || indices[true_length..].iter().any(|&i| i != PAD) {
            return Err(Error::data("encoded sequence must be PAD beyond its true length"));
        }
        Ok(Self {
            indices,
            true_length,
        })
    }

    /// The non-PAD prefix.
    pub fn active(&self) -> &[usize] {
        &self.indices[..self.true_length]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_orders_by_frequency_then_text() {
        let v = Vocabulary::build(&["go", "go now"]).unwrap();
        assert_eq!(v.index_of("go"), Some(4));
        assert_eq!(v.index_of("now"), Some(5));
        assert_eq!(v.len(), 6);
        let v = Vocabulary::build(&["b a", "c"]).unwrap();
        assert_eq!(&v.tokens()[4..], ["a", "b", "c"]);
        assert!(Vocabulary::build::<&str>(&[]).is_err());
    }

    #[test]
    fn misfit_tokens_get_their_own_index() {
        let v = Vocabulary::build(&["code", "c0de"]).unwrap();
        assert_ne!(v.index_of("code"), v.index_of("c0de"));
        assert!(v.index_of("c0de").unwrap() > UNK);
    }

    #[test]
    fn encode_target_and_source() {
        let v = Vocabulary::build(&["go"]).unwrap();
        let t = v.encode("go", 5, Role::Target).unwrap();
        assert_eq!(t.indices, vec![SOS, 4, EOS, PAD, PAD]);
        assert_eq!(t.true_length, 3);
        let s = v.encode("go", 5, Role::Source).unwrap();
        assert_eq!(s.indices, vec![4, EOS, PAD, PAD, PAD]);
        assert_eq!(s.true_length, 2);
        let u = v.encode("zzz go", 5, Role::Source).unwrap();
        assert_eq!(u.indices[0], UNK);
        assert!(matches!(
            v.encode("go go go go", 5, Role::Target),
            Err(Error::TooLong { tokens: 4, max_len: 5 })
        ));
    }

    #[test]
    fn decode_strips_specials() {
        let v = Vocabulary::build(&["go"]).unwrap();
        let seq = EncodedSequence::new(vec![SOS, 4, EOS, PAD], 3).unwrap();
        assert_eq!(v.decode(&seq).unwrap(), "go");
        assert_eq!(v.decode_indices(&[EOS]).unwrap(), "");
        assert!(matches!(v.decode_indices(&[99]), Err(Error::Index { index: 99, .. })));
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(&["el perro come", "el gato"]).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.content_hash(), back.content_hash());
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }
}
