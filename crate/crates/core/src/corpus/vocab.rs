// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

/// Split text into word tokens; punctuation characters become their own
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if RESERVED.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Word-level vocabulary. Reserved tokens take ids 0..3; the rest follow in
/// lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn build(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from empty text".into()));
        }
        let words: BTreeSet<String> = tokenize(text)
            .into_iter()
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words).collect::<Vec<_>>();
        Ok(Self::from(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
