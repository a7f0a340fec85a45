use std::collections::HashMap;

use crate::error::{DealError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Whitespace word tokenizer over lowercased, punctuation-free text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
}

impl Tokenizer {
    /// Vocabulary in first-occurrence order after the reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Tokenizer {
        let mut tok = Tokenizer {
            vocab: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        for text in corpus {
            for w in words(text.as_ref()) {
                if !tok.index.contains_key(&w) {
                    tok.index.insert(w.clone(), tok.vocab.len());
                    tok.vocab.push(w);
                }
            }
        }
        tok
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Tokenizer> {
        if vocab.len() < RESERVED.len() || vocab[..RESERVED.len()] != RESERVED {
            return Err(DealError::Checkpoint("vocabulary must start with the reserved tokens".into()));
        }
        let index = vocab
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Tokenizer { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// `[bos, word ids…, eos]`, unknown words mapped to `unk`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(words(text).map(|w| self.id(&w).unwrap_or(UNK)));
        ids.push(EOS);
        ids
    }

    /// Tokenized and right-padded to `len`; error if it does not fit.
    pub fn encode_padded(&self, text: &str, len: usize) -> Result<Vec<usize>> {
        let mut ids = self.tokenize(text);
        if ids.len() > len {
            return Err(DealError::Text(format!("{text:?} needs {} tokens, limit is {len}", ids.len())));
        }
        ids.resize(len, PAD);
        Ok(ids)
    }
}
