use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

/// Token/id map with PAD, UNK and EOS pinned at ids 0, 1 and 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary tokens; duplicates and reserved names are skipped.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for t in [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN] {
            vocab.push(t);
        }
        for t in tokens {
            let t = t.as_ref();
            if !vocab.token_to_id.contains_key(t) {
                vocab.push(t);
            }
        }
        if vocab.len() < 4 {
            return Err(Error::Config(
                "vocabulary needs at least one ordinary token".into(),
            ));
        }
        Ok(vocab)
    }

    fn push(&mut self, token: &str) {
        self.token_to_id
            .insert(token.to_string(), self.id_to_token.len());
        self.id_to_token.push(token.to_string());
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        let reserved = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN];
        if tokens.len() < 3 || tokens[..3] != reserved {
            return Err(Error::Validation(
                "vocabulary must start with <pad>, <unk>, <eos>".into(),
            ));
        }
        Self::new(&tokens[3..])
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}
