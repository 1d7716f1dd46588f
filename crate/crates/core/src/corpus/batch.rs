use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::PostResponsePair;
use super::vocab::PAD;
use crate::error::{Error, Result};

/// Padded row-major id matrices for a group of pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub post_width: usize,
    pub resp_width: usize,
    pub post_ids: Vec<usize>,
    pub post_mask: Vec<bool>,
    pub resp_ids: Vec<usize>,
    pub resp_mask: Vec<bool>,
    pub post_lengths: Vec<usize>,
    pub resp_lengths: Vec<usize>,
    pub gold_focus_slot: Vec<Option<usize>>,
    /// Index of each row's pair in the source slice.
    pub source: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&PostResponsePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let posts: Vec<&[usize]> = pairs.iter().map(|p| p.post.as_slice()).collect();
        let resps: Vec<&[usize]> = pairs.iter().map(|p| p.response.as_slice()).collect();
        let (post_ids, post_mask, post_width) = pad(&posts)?;
        let (resp_ids, resp_mask, resp_width) = pad(&resps)?;
        Ok(Self {
            rows: pairs.len(),
            post_width,
            resp_width,
            post_ids,
            post_mask,
            resp_ids,
            resp_mask,
            post_lengths: posts.iter().map(|p| p.len()).collect(),
            resp_lengths: resps.iter().map(|r| r.len()).collect(),
            gold_focus_slot: pairs.iter().map(|p| p.gold_focus_slot).collect(),
            source: Vec::new(),
        })
    }

    /// Post-only batch for inference.
    pub fn from_posts(posts: &[&[usize]]) -> Result<Self> {
        if posts.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let (post_ids, post_mask, post_width) = pad(posts)?;
        Ok(Self {
            rows: posts.len(),
            post_width,
            resp_width: 0,
            post_ids,
            post_mask,
            resp_ids: Vec::new(),
            resp_mask: Vec::new(),
            post_lengths: posts.iter().map(|p| p.len()).collect(),
            resp_lengths: Vec::new(),
            gold_focus_slot: vec![None; posts.len()],
            source: Vec::new(),
        })
    }

    pub fn has_responses(&self) -> bool {
        !self.resp_lengths.is_empty()
    }

    pub fn post_row(&self, r: usize) -> &[usize] {
        &self.post_ids[r * self.post_width..r * self.post_width + self.post_lengths[r]]
    }

    pub fn resp_row(&self, r: usize) -> &[usize] {
        &self.resp_ids[r * self.resp_width..r * self.resp_width + self.resp_lengths[r]]
    }
}

fn pad(seqs: &[&[usize]]) -> Result<(Vec<usize>, Vec<bool>, usize)> {
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::Validation("empty sequence in batch".into()));
    }
    if seqs.iter().any(|s| s.contains(&PAD)) {
        return Err(Error::Validation("PAD inside a sequence".into()));
    }
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = vec![PAD; seqs.len() * width];
    let mut mask = vec![false; seqs.len() * width];
    for (r, s) in seqs.iter().enumerate() {
        ids[r * width..r * width + s.len()].copy_from_slice(s);
        mask[r * width..r * width + s.len()].fill(true);
    }
    Ok((ids, mask, width))
}

/// Splits `pairs` into batches covering every pair once, in a shuffled order
/// when `shuffle_seed` is given.
pub fn make_batches(
    pairs: &[PostResponsePair],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Validation("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<&PostResponsePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let mut b = Batch::from_pairs(&rows)?;
            b.source = chunk.to_vec();
            Ok(b)
        })
        .collect()
}
