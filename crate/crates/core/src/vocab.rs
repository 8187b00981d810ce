//! Closed, whitespace word-level vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by every distinct whitespace-separated word, sorted.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let words: BTreeSet<&str> = corpus
            .iter()
            .flat_map(|l| l.as_ref().split_whitespace())
            .filter(|w| !SPECIALS.contains(w))
            .collect();
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(words)
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 5 tokens, got {}",
                tokens.len()
            )));
        }
        if tokens[..4].iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
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

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Word ids of `text`; out-of-vocabulary words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        TokenSeq::raw(self.encode(text))
    }

    /// Joins non-special tokens with single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Raw,
    Prompt,
    Completion,
}

/// Token ids with a per-position role tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
}

impl TokenSeq {
    pub fn tagged(ids: Vec<usize>, role: Role) -> Self {
        let roles = vec![role; ids.len()];
        Self { ids, roles }
    }

    pub fn raw(ids: Vec<usize>) -> Self {
        Self::tagged(ids, Role::Raw)
    }

    pub fn prompt(ids: Vec<usize>) -> Self {
        Self::tagged(ids, Role::Prompt)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: usize, role: Role) {
        self.ids.push(id);
        self.roles.push(role);
    }

    pub fn extend(&mut self, other: &TokenSeq) {
        self.ids.extend_from_slice(&other.ids);
        self.roles.extend_from_slice(&other.roles);
    }

    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut out = self.clone();
        out.extend(other);
        out
    }

    /// Ids at positions tagged `role`.
    pub fn span(&self, role: Role) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.roles)
            .filter(|(_, &r)| r == role)
            .map(|(&i, _)| i)
            .collect()
    }

    pub fn check_in_vocab(&self, vocab_len: usize) -> Result<()> {
        match self.ids.iter().find(|&&i| i >= vocab_len) {
            Some(bad) => Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {vocab_len}"
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_unions_words_after_specials() {
        let v = Vocab::build(&["a b", "b c"]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(&v.tokens()[4..], &["a", "b", "c"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocab::build(&empty), Err(Error::Config(_))));
    }

    #[test]
    fn tokenize_rules() {
        let v = Vocab::build(&["a b"]).unwrap();
        let s = v.tokenize("a b");
        assert_eq!(s.ids, vec![v.id("a").unwrap(), v.id("b").unwrap()]);
        assert_eq!(v.detokenize(&s.ids), "a b");
        assert_eq!(v.tokenize("zzz").ids, vec![UNK]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.detokenize(&[]), "");
        assert_eq!(v.detokenize(&[BOS, v.id("a").unwrap(), EOS]), "a");
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let toks = ["<pad>", "<bos>", "<eos>", "<unk>", "x", "x"]
            .map(String::from)
            .to_vec();
        assert!(Vocab::from_tokens(toks).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab(words in proptest::collection::vec("[a-e]{1,3}", 1..12)) {
            let text = words.join(" ");
            let v = Vocab::build(&[text.as_str()]).unwrap();
            let ids = v.encode(&text);
            prop_assert_eq!(v.detokenize(&ids), text);
        }
    }
}
