//! Multi-reference BLEU, distinct-n diversity and focus/coverage alignment.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{strip_special, Dataset};
use crate::error::{Error, Result};
use crate::focus::coverage_report;
use crate::model::FocusCvae;

/// Posts generated per `generate` call during evaluation.
const EVAL_CHUNK: usize = 64;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-`n` (`n` in {1, 2}) with counts clipped by the per-post maximum
/// over that post's references and no smoothing.
///
/// `hypotheses[p]` are the responses generated for post `p`, `references[p]`
/// its reference set.
pub fn multi_bleu<T: Eq + Hash>(
    hypotheses: &[Vec<Vec<T>>],
    references: &[Vec<Vec<T>>],
    n: usize,
) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::Validation(format!(
            "BLEU order must be 1 or 2, got {n}"
        )));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::dim(
            "multi_bleu",
            &[hypotheses.len()],
            &[references.len()],
        ));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyps, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Validation("post has an empty reference set".into()));
        }
        for order in 1..=n {
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, order) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for h in hyps {
                for (g, c) in ngram_counts(h, order) {
                    matched[order - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                    total[order - 1] += c;
                }
            }
        }
        for h in hyps {
            hyp_len += h.len();
            // closest reference length, shorter on ties
            ref_len += refs
                .iter()
                .map(|r| r.len())
                .min_by_key(|&l| (l.abs_diff(h.len()), l))
                .expect("non-empty reference set");
        }
    }
    if hyp_len == 0 || matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(bp * log_precision.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistScope {
    /// Per post, then averaged over posts.
    Intra,
    /// Pooled over every response.
    Inter,
}

/// Distinct-`n` ratio over responses grouped by post. Groups with no n-grams
/// count as 0 in the intra average.
pub fn dist_metrics<T: Eq + Hash>(
    groups: &[Vec<Vec<T>>],
    n: usize,
    scope: DistScope,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Validation("n-gram order must be positive".into()));
    }
    let ratio = |responses: &mut dyn Iterator<Item = &Vec<T>>| {
        let mut distinct: HashMap<&[T], ()> = HashMap::new();
        let mut total = 0usize;
        for r in responses {
            if r.len() >= n {
                for g in r.windows(n) {
                    distinct.insert(g, ());
                    total += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            distinct.len() as f64 / total as f64
        }
    };
    Ok(match scope {
        DistScope::Inter => ratio(&mut groups.iter().flatten()),
        DistScope::Intra => {
            if groups.is_empty() {
                return Ok(0.0);
            }
            groups.iter().map(|g| ratio(&mut g.iter())).sum::<f64>() / groups.len() as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub intra_dist1: f64,
    pub intra_dist2: f64,
    pub inter_dist1: f64,
    pub inter_dist2: f64,
    pub n_posts: usize,
    pub n_responses: usize,
    /// Mean `||D/|y| - F||_2` over generations; absent without a focus pathway.
    pub mean_alignment_gap: Option<f64>,
}

impl MetricReport {
    /// Sorted keys, floats fixed to six decimals, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        let f = |x: f64| format!("{x:.6}");
        let gap = self.mean_alignment_gap.map_or("null".to_string(), f);
        format!(
            concat!(
                "{{\"bleu1\":{},\"bleu2\":{},\"inter_dist1\":{},\"inter_dist2\":{},",
                "\"intra_dist1\":{},\"intra_dist2\":{},\"mean_alignment_gap\":{},",
                "\"n_posts\":{},\"n_responses\":{}}}"
            ),
            f(self.bleu1),
            f(self.bleu2),
            f(self.inter_dist1),
            f(self.inter_dist2),
            f(self.intra_dist1),
            f(self.intra_dist2),
            gap,
            self.n_posts,
            self.n_responses
        )
    }
}

/// One generated response in the per-post detail table.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailRow {
    pub post_id: usize,
    pub sample_id: usize,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub focus: Option<Vec<f64>>,
    pub coverage_final: Vec<f64>,
    pub alignment_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub details: Vec<DetailRow>,
}

impl Evaluation {
    /// CSV with header `post_id,sample_id,tokens,alignment_gap`.
    pub fn details_csv(&self) -> String {
        let mut out = String::from("post_id,sample_id,tokens,alignment_gap\n");
        for d in &self.details {
            let gap = d.alignment_gap.map_or(String::new(), |g| format!("{g:.6}"));
            let _ = writeln!(
                out,
                "{},{},{},{}",
                d.post_id,
                d.sample_id,
                d.tokens.join(" "),
                gap
            );
        }
        out
    }
}

/// Generates `n_samples` responses per test post from the prior and scores them.
pub fn evaluate(
    model: &FocusCvae,
    test: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<Evaluation> {
    if n_samples == 0 {
        return Err(Error::Validation("n_samples must be positive".into()));
    }
    if test.entries.is_empty() {
        return Err(Error::Validation("test set is empty".into()));
    }
    let vocab = &model.vocab;
    for tok in test.tokens() {
        if !vocab.tokens().contains(&tok) {
            return Err(Error::Compatibility(format!(
                "test token {tok:?} is not in the model vocabulary"
            )));
        }
    }
    let posts: Vec<Vec<usize>> = test.entries.iter().map(|e| vocab.encode(&e.post)).collect();
    let references: Vec<Vec<Vec<usize>>> = test
        .entries
        .iter()
        .map(|e| {
            e.responses
                .iter()
                .map(|r| strip_special(&vocab.encode(r)))
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = model.config.max_decode_len();
    let mut details = Vec::with_capacity(posts.len() * n_samples);
    for (chunk_index, chunk) in posts.chunks(EVAL_CHUNK).enumerate() {
        let generated = model.generate(chunk, n_samples, &mut rng, max_len)?;
        for (k, g) in generated.into_iter().enumerate() {
            let alignment_gap = match &g.focus {
                Some(f) => Some(coverage_report(&g.coverage_final, g.steps(), f)?.distance),
                None => None,
            };
            let ids = strip_special(&g.token_ids);
            details.push(DetailRow {
                post_id: chunk_index * EVAL_CHUNK + k / n_samples,
                sample_id: k % n_samples,
                tokens: vocab.decode(&ids),
                token_ids: ids,
                focus: g.focus,
                coverage_final: g.coverage_final,
                alignment_gap,
            });
        }
    }

    let hypotheses: Vec<Vec<Vec<usize>>> = details
        .chunks(n_samples)
        .map(|c| c.iter().map(|d| d.token_ids.clone()).collect())
        .collect();
    let gaps: Vec<f64> = details.iter().filter_map(|d| d.alignment_gap).collect();
    let report = MetricReport {
        bleu1: multi_bleu(&hypotheses, &references, 1)?,
        bleu2: multi_bleu(&hypotheses, &references, 2)?,
        intra_dist1: dist_metrics(&hypotheses, 1, DistScope::Intra)?,
        intra_dist2: dist_metrics(&hypotheses, 2, DistScope::Intra)?,
        inter_dist1: dist_metrics(&hypotheses, 1, DistScope::Inter)?,
        inter_dist2: dist_metrics(&hypotheses, 2, DistScope::Inter)?,
        n_posts: posts.len(),
        n_responses: details.len(),
        mean_alignment_gap: (!gaps.is_empty())
            .then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
    };
    Ok(Evaluation { report, details })
}
