//! Keyword-slot corpus with known focus structure.
//!
//! Each post scatters `slots` distinct keyword tokens among filler tokens.
//! Each response elaborates exactly one of those keywords:
//! `opener keyword associate(keyword) closer`. The targeted keyword's post
//! position is recorded as the response's gold focus slot.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, PostEntry};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

const OPENERS: usize = 4;
const CLOSERS: usize = 4;
const RESERVED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub post_len: usize,
    pub slots: usize,
    pub responses_per_post: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            post_len: 8,
            slots: 2,
            responses_per_post: 3,
        }
    }
}

/// How the ordinary tokens of a synthetic vocabulary are split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthLayout {
    pub keywords: usize,
    pub fillers: usize,
}

impl SynthConfig {
    pub fn layout(&self) -> Result<SynthLayout> {
        if self.slots == 0 || self.responses_per_post == 0 {
            return Err(Error::Config(
                "slots and responses_per_post must be positive".into(),
            ));
        }
        if self.post_len < self.slots {
            return Err(Error::Config(format!(
                "post length {} cannot hold {} keyword slots",
                self.post_len, self.slots
            )));
        }
        let free = self.vocab_size.saturating_sub(RESERVED + OPENERS + CLOSERS);
        let keywords = free / 3;
        let fillers = free - 2 * keywords;
        if keywords < self.slots || fillers == 0 {
            return Err(Error::Config(format!(
                "vocab size {} too small for {} keyword slots",
                self.vocab_size, self.slots
            )));
        }
        Ok(SynthLayout { keywords, fillers })
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let layout = self.layout()?;
        let mut tokens = Vec::new();
        tokens.extend((0..OPENERS).map(|i| format!("open{i}")));
        tokens.extend((0..CLOSERS).map(|i| format!("close{i}")));
        tokens.extend((0..layout.keywords).map(keyword));
        tokens.extend((0..layout.keywords).map(associate));
        tokens.extend((0..layout.fillers).map(|i| format!("fill{i:02}")));
        let vocab = Vocabulary::new(&tokens)?;
        debug_assert_eq!(vocab.len(), self.vocab_size);
        Ok(vocab)
    }
}

pub fn keyword(i: usize) -> String {
    format!("kw{i:02}")
}

pub fn associate(i: usize) -> String {
    format!("as{i:02}")
}

pub fn is_keyword(token: &str) -> bool {
    token.starts_with("kw")
}

/// Generates `n_pairs` post-response pairs. Posts get `responses_per_post`
/// responses, spread so that no post falls below the others by more than one.
pub fn generate_synthetic(
    seed: u64,
    n_pairs: usize,
    config: &SynthConfig,
) -> Result<(Dataset, Vocabulary)> {
    let layout = config.layout()?;
    let vocab = config.vocabulary()?;
    if n_pairs == 0 {
        return Ok((Dataset::default(), vocab));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_posts = n_pairs.div_ceil(config.responses_per_post);
    let base = n_pairs / n_posts;
    let extra = n_pairs % n_posts;

    let keyword_ids: Vec<usize> = (0..layout.keywords).collect();
    let mut entries = Vec::with_capacity(n_posts);
    for p in 0..n_posts {
        let n_resp = base + usize::from(p < extra);

        let chosen: Vec<usize> = keyword_ids
            .choose_multiple(&mut rng, config.slots)
            .copied()
            .collect();
        let mut positions: Vec<usize> = (0..config.post_len).collect();
        positions.shuffle(&mut rng);
        let mut slot_positions = positions[..config.slots].to_vec();
        slot_positions.sort_unstable();

        let mut post: Vec<String> = (0..config.post_len)
            .map(|_| format!("fill{:02}", rng.random_range(0..layout.fillers)))
            .collect();
        for (&pos, &kw) in slot_positions.iter().zip(&chosen) {
            post[pos] = keyword(kw);
        }

        // the first responses cover distinct slots, the rest pick freely
        let mut order: Vec<usize> = (0..config.slots).collect();
        order.shuffle(&mut rng);
        let mut targets: Vec<usize> = order.into_iter().take(n_resp).collect();
        while targets.len() < n_resp {
            targets.push(rng.random_range(0..config.slots));
        }

        let mut responses = Vec::with_capacity(n_resp);
        let mut gold = Vec::with_capacity(n_resp);
        for &slot in &targets {
            let kw = chosen[slot];
            responses.push(vec![
                format!("open{}", rng.random_range(0..OPENERS)),
                keyword(kw),
                associate(kw),
                format!("close{}", rng.random_range(0..CLOSERS)),
            ]);
            gold.push(slot_positions[slot]);
        }
        entries.push(PostEntry {
            post,
            responses,
            gold_focus_slot: Some(gold),
        });
    }
    Ok((Dataset::new(entries), vocab))
}
