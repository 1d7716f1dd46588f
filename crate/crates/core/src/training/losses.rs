use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{Batch, EOS, PAD};
use crate::error::{Error, Result};

/// The terms of the total objective `l_seq + l_foc + gamma * l_kl + l_bow`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_seq: f64,
    pub l_foc: f64,
    pub l_kl: f64,
    pub l_bow: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recomposed(&self) -> f64 {
        self.l_seq + self.l_foc + self.gamma * self.l_kl + self.l_bow
    }

    pub fn csv_header() -> &'static str {
        "step,l_seq,l_foc,l_kl,l_bow,gamma,lr,total"
    }

    pub fn csv_row(&self, step: u64, lr: f64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_seq, self.l_foc, self.l_kl, self.l_bow, self.gamma, lr, self.total
        )
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_seq", self.l_seq),
            ("l_foc", self.l_foc),
            ("l_kl", self.l_kl),
            ("l_bow", self.l_bow),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Token-level cross entropy averaged over every unmasked response position.
pub fn seq_loss(tape: &Tape, logits: &[Var], batch: &Batch) -> Result<Var> {
    if logits.len() != batch.resp_width {
        return Err(Error::dim("seq_loss", &[logits.len()], &[batch.resp_width]));
    }
    let n_tokens: usize = batch.resp_lengths.iter().sum();
    let inv = 1.0 / n_tokens as f64;
    let mut total: Option<Var> = None;
    for (t, &step_logits) in logits.iter().enumerate() {
        let mut targets = Vec::with_capacity(batch.rows);
        let mut weights = Vec::with_capacity(batch.rows);
        for r in 0..batch.rows {
            let i = r * batch.resp_width + t;
            targets.push(batch.resp_ids[i]);
            weights.push(if batch.resp_mask[i] { inv } else { 0.0 });
        }
        let step = tape.nll(step_logits, &targets, &weights)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, step)?,
            None => step,
        });
    }
    total.ok_or_else(|| Error::Validation("no response positions".into()))
}

/// Mean over rows of `||D/|y| - F||_2`, `D` the final coverage `[B × n]`.
pub fn focus_loss(tape: &Tape, coverage: Var, resp_lengths: &[usize], focus: Var) -> Result<Var> {
    let shape = tape.shape(coverage);
    let (rows, width) = (shape[0], shape[1]);
    if resp_lengths.len() != rows {
        return Err(Error::dim("focus_loss", &shape, &[resp_lengths.len()]));
    }
    if resp_lengths.contains(&0) {
        return Err(Error::Validation("response length must be positive".into()));
    }
    let scale: Vec<f64> = resp_lengths
        .iter()
        .flat_map(|&l| std::iter::repeat_n(1.0 / l as f64, width))
        .collect();
    let scale = tape.constant(Tensor::matrix(rows, width, scale)?);
    let diff = tape.sub(tape.mul(coverage, scale)?, focus)?;
    let sq = tape.row_sum(tape.mul(diff, diff)?);
    let norms = tape.sqrt(sq)?;
    Ok(tape.mean(norms))
}

#[derive(Debug, Clone, Copy)]
pub struct BowWeights {
    /// `[(d_z + d_h) × d_bow]`
    pub w1: Var,
    pub b1: Var,
    /// `[d_bow × V]`
    pub w2: Var,
    pub b2: Var,
}

/// Bag-of-words logits `tanh([z; h̄_x] W1 + b1) W2 + b2`, `[B × V]`.
pub fn bow_logits(tape: &Tape, z: Var, post_summary: Var, w: &BowWeights) -> Result<Var> {
    let input = tape.concat_cols(&[z, post_summary])?;
    let hidden = tape.tanh(tape.add_row(tape.matmul(input, w.w1)?, w.b1)?);
    tape.add_row(tape.matmul(hidden, w.w2)?, w.b2)
}

/// Mean over every non-PAD, non-EOS gold token of `-log softmax(bow_logits)[token]`.
/// Zero when no row has such a token.
pub fn bow_loss(tape: &Tape, logits: Var, batch: &Batch) -> Result<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for r in 0..batch.rows {
        for &tok in batch.resp_row(r) {
            if tok != PAD && tok != EOS {
                rows.push(r);
                targets.push(tok);
            }
        }
    }
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let expanded = tape.gather_rows(logits, &rows)?;
    let weights = vec![1.0 / rows.len() as f64; rows.len()];
    tape.nll(expanded, &targets, &weights)
}
