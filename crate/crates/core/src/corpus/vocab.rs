// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::world::WorldStructure;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

pub const FUNCTION_WORDS: [&str; 12] = [
    "the", "capital", "of", "is", "at", "row", "column", "near", "was", "founded", "in", "resembles",
];

/// Largest vocabulary the templates are allowed to need.
pub const MAX_VOCAB: usize = 512;

/// Bijection between token strings and ids. Ids 0-3 are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(invalid("vocabulary must start with the four reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(invalid(format!("token {t:?} is not a single word")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens, function words, row/column/era value tokens, then
    /// entity names in id order.
    pub fn for_world(world: &WorldStructure) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        let g = world.config.grid_size;
        tokens.extend((0..g).map(row_token));
        tokens.extend((0..g).map(col_token));
        tokens.extend((0..world.config.n_eras).map(era_token));
        tokens.extend(world.entities.iter().map(|e| e.name.clone()));
        if tokens.len() > MAX_VOCAB {
            return Err(invalid(format!("vocabulary of {} tokens exceeds {MAX_VOCAB}", tokens.len())));
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, vocab: self.tokens.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<u32>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<&str>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < RESERVED.len()
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

pub fn row_token(r: u32) -> String {
    format!("r{r}")
}

pub fn col_token(c: u32) -> String {
    format!("c{c}")
}

pub fn era_token(e: u32) -> String {
    format!("era{e}")
}
