use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, EOS, EOS_TOKEN, PAD};
use crate::error::{Error, Result};

/// One post with all of its reference responses; the JSONL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostEntry {
    pub post: Vec<String>,
    pub responses: Vec<Vec<String>>,
    /// Post position of the keyword each response elaborates, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_focus_slot: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub entries: Vec<PostEntry>,
}

/// A single encoded training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostResponsePair {
    pub post: Vec<usize>,
    /// Always ends with EOS.
    pub response: Vec<usize>,
    pub gold_focus_slot: Option<usize>,
    pub post_index: usize,
}

impl PostEntry {
    fn validate(&self) -> Result<()> {
        if self.post.is_empty() {
            return Err(Error::Validation("empty post".into()));
        }
        if self.responses.is_empty() {
            return Err(Error::Validation("post without responses".into()));
        }
        if self.responses.iter().any(Vec::is_empty) {
            return Err(Error::Validation("empty response".into()));
        }
        if let Some(slots) = &self.gold_focus_slot {
            if slots.len() != self.responses.len() {
                return Err(Error::Validation(format!(
                    "{} gold_focus_slot values for {} responses",
                    slots.len(),
                    self.responses.len()
                )));
            }
            if let Some(&bad) = slots.iter().find(|&&s| s >= self.post.len()) {
                return Err(Error::Validation(format!(
                    "gold_focus_slot {bad} beyond post length {}",
                    self.post.len()
                )));
            }
        }
        Ok(())
    }
}

impl Dataset {
    pub fn new(entries: Vec<PostEntry>) -> Self {
        Self { entries }
    }

    pub fn n_posts(&self) -> usize {
        self.entries.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.entries.iter().map(|e| e.responses.len()).sum()
    }

    /// Every distinct token in first-seen order.
    pub fn tokens(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            for t in e.post.iter().chain(e.responses.iter().flatten()) {
                if seen.insert(t.as_str()) {
                    out.push(t.clone());
                }
            }
        }
        out
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Vec<PostResponsePair> {
        let mut pairs = Vec::with_capacity(self.n_pairs());
        for (pi, e) in self.entries.iter().enumerate() {
            let post = vocab.encode(&e.post);
            for (ri, resp) in e.responses.iter().enumerate() {
                pairs.push(PostResponsePair {
                    post: post.clone(),
                    response: encode_response(vocab, resp),
                    gold_focus_slot: e.gold_focus_slot.as_ref().map(|s| s[ri]),
                    post_index: pi,
                });
            }
        }
        pairs
    }

    /// Splits off the last `n` posts.
    pub fn split_tail(&self, n: usize) -> (Dataset, Dataset) {
        let cut = self.entries.len().saturating_sub(n);
        (
            Dataset::new(self.entries[..cut].to_vec()),
            Dataset::new(self.entries[cut..].to_vec()),
        )
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<jsonl>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: PostEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })?;
            entry.validate().map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }
}

pub fn encode_response<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S]) -> Vec<usize> {
    let mut ids = vocab.encode(tokens);
    if tokens.last().map(|t| t.as_ref()) != Some(EOS_TOKEN) {
        ids.push(EOS);
    }
    ids
}

/// Drops everything from the first EOS on, and any PAD.
pub fn strip_special(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .take_while(|&t| t != EOS)
        .filter(|&t| t != PAD)
        .collect()
}
