use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    Char,
    Word,
}

/// A tokenized text with its vocabulary. Ids are assigned in order of first
/// appearance, so the same text always yields the same ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub ids: Vec<u32>,
    pub vocab: Vec<String>,
    pub tokenization: Tokenization,
}

/// Contiguous train / validation / test partition of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

pub fn load_corpus(path: &Path, tokenization: Tokenization) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
    Corpus::from_text(&text, tokenization)
}

impl Corpus {
    pub fn from_text(text: &str, tokenization: Tokenization) -> Result<Self> {
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut vocab = Vec::new();
        let mut ids = Vec::new();
        let mut push = |tok: String| {
            let next = vocab.len() as u32;
            let id = *index.entry(tok.clone()).or_insert_with(|| {
                vocab.push(tok);
                next
            });
            ids.push(id);
        };
        match tokenization {
            Tokenization::Char => text.chars().for_each(|c| push(c.to_string())),
            Tokenization::Word => text.split_whitespace().for_each(|w| push(w.to_string())),
        }
        if ids.is_empty() {
            return Err(Error::InvalidData("corpus contains no tokens".into()));
        }
        Ok(Self {
            ids,
            vocab,
            tokenization,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Splits by token position: the first 90% trains, the next 5% validates,
    /// the rest tests.
    pub fn split(&self) -> Splits {
        let n = self.ids.len();
        let train_end = n * 90 / 100;
        let valid_end = n * 95 / 100;
        Splits {
            train: self.ids[..train_end].to_vec(),
            valid: self.ids[train_end..valid_end].to_vec(),
            test: self.ids[valid_end..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_vocab_in_first_appearance_order() {
        let c = Corpus::from_text("abab", Tokenization::Char).unwrap();
        assert_eq!(c.vocab, vec!["a", "b"]);
        assert_eq!(c.ids, vec![0, 1, 0, 1]);
    }

    #[test]
    fn word_tokens() {
        let c = Corpus::from_text("a b a", Tokenization::Word).unwrap();
        assert_eq!(c.vocab, vec!["a", "b"]);
        assert_eq!(c.ids, vec![0, 1, 0]);
    }

    #[test]
    fn empty_is_invalid() {
        assert!(matches!(Corpus::from_text("", Tokenization::Char), Err(Error::InvalidData(_))));
        assert!(matches!(Corpus::from_text("  \n", Tokenization::Word), Err(Error::InvalidData(_))));
    }

    #[test]
    fn split_covers_everything() {
        let text: String = (0..1000).map(|i| char::from(b'a' + (i % 7) as u8)).collect();
        let c = Corpus::from_text(&text, Tokenization::Char).unwrap();
        let s = c.split();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (900, 50, 50));
    }
}
