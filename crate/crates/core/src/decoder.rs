//! Two-layer GRU decoder: teacher-forced unrolling for training and greedy
//! decoding for generation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gru_cell, GruWeights, Tape, Var};
use crate::config::Variant;
use crate::corpus::{Batch, EOS};
use crate::encoders::LatentSource;
use crate::error::{Error, Result};
use crate::focus::{attend_step, AttentionMemory, AttentionWeights, Coverage};

#[derive(Debug, Clone, Copy)]
pub struct DecoderWeights {
    pub embedding: Var,
    /// Learned input for the first step, `[1 × d_z]`.
    pub start: Var,
    /// `s_0 = tanh(h̄_x W_x + z W_z + b)`, split across the two layers.
    pub init_x: Var,
    pub init_z: Option<Var>,
    pub init_b: Var,
    pub layers: [GruWeights; 2],
    pub out_w: Var,
    pub out_b: Var,
    pub attn: AttentionWeights,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub layers: [Var; 2],
}

impl DecoderState {
    pub fn top(&self) -> Var {
        self.layers[1]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeStepOutput {
    pub logits: Var,
    pub state: DecoderState,
    pub alpha: Var,
    pub context: Var,
}

pub fn initial_state(
    tape: &Tape,
    w: &DecoderWeights,
    post_summary: Var,
    z: Option<Var>,
) -> Result<DecoderState> {
    let mut pre = tape.matmul(post_summary, w.init_x)?;
    if let (Some(wz), Some(z)) = (w.init_z, z) {
        pre = tape.add(pre, tape.matmul(z, wz)?)?;
    }
    let s0 = tape.tanh(tape.add_row(pre, w.init_b)?);
    let width = tape.shape(s0)[1];
    let d_h = width / 2;
    Ok(DecoderState {
        layers: [
            tape.slice_cols(s0, 0, d_h)?,
            tape.slice_cols(s0, d_h, width)?,
        ],
    })
}

/// Attention from `s_{t-1}`, then `s_t = GRU([input; context], s_{t-1})`,
/// then `logits = W_d [s_t; context] + d_d`.
#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    tape: &Tape,
    w: &DecoderWeights,
    memory: &AttentionMemory<'_>,
    input: Var,
    state: DecoderState,
    coverage: &mut Coverage,
    t: usize,
    active: &[bool],
    variant: Variant,
) -> Result<DecodeStepOutput> {
    let att = attend_step(
        tape,
        memory,
        state.top(),
        coverage,
        t,
        active,
        variant,
        &w.attn,
    )?;
    let x = tape.concat_cols(&[input, att.context])?;
    let s1 = gru_cell(tape, x, state.layers[0], &w.layers[0])?;
    let s2 = gru_cell(tape, s1, state.layers[1], &w.layers[1])?;
    let readout = tape.concat_cols(&[s2, att.context])?;
    let logits = tape.add_row(tape.matmul(readout, w.out_w)?, w.out_b)?;
    Ok(DecodeStepOutput {
        logits,
        state: DecoderState { layers: [s1, s2] },
        alpha: att.alpha,
        context: att.context,
    })
}

#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// One `[B × V]` logits matrix per response position.
    pub logits: Vec<Var>,
    pub alphas: Vec<Var>,
    /// Coverage after each step.
    pub coverage_trace: Vec<Var>,
    pub coverage: Coverage,
}

/// Unrolls over the gold responses. Step `t` reads gold token `y_{t-1}`
/// (the start vector at `t = 1`); rows past their length stop accumulating coverage.
pub fn decode_train(
    tape: &Tape,
    w: &DecoderWeights,
    memory: &AttentionMemory<'_>,
    batch: &Batch,
    init: DecoderState,
    variant: Variant,
) -> Result<TeacherForced> {
    if !batch.has_responses() {
        return Err(Error::Phase("teacher forcing needs gold responses"));
    }
    let rows = batch.rows;
    let mut state = init;
    let mut coverage = Coverage::new(tape, rows, memory.width);
    let start = tape.repeat_rows(w.start, rows)?;
    let mut out = TeacherForced {
        logits: Vec::with_capacity(batch.resp_width),
        alphas: Vec::with_capacity(batch.resp_width),
        coverage_trace: Vec::with_capacity(batch.resp_width),
        coverage: coverage.clone(),
    };
    for t in 1..=batch.resp_width {
        let input = if t == 1 {
            start
        } else {
            let prev: Vec<usize> = (0..rows)
                .map(|r| batch.resp_ids[r * batch.resp_width + t - 2])
                .collect();
            tape.gather_rows(w.embedding, &prev)?
        };
        let active: Vec<bool> = batch.resp_lengths.iter().map(|&l| t <= l).collect();
        let step = decode_step(
            tape,
            w,
            memory,
            input,
            state,
            &mut coverage,
            t,
            &active,
            variant,
        )?;
        state = step.state;
        out.logits.push(step.logits);
        out.alphas.push(step.alpha);
        out.coverage_trace.push(coverage.d);
    }
    out.coverage = coverage;
    Ok(out)
}

/// One generated response with the diagnostics that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated ids, ending with EOS unless truncated at the length limit.
    pub token_ids: Vec<usize>,
    /// Focus over the post's positions; absent for the plain-attention variant.
    pub focus: Option<Vec<f64>>,
    pub coverage_final: Vec<f64>,
    pub z_source: Option<LatentSource>,
}

impl GenerationResult {
    /// Number of decoding steps taken, `|y|` for normalizing the coverage.
    pub fn steps(&self) -> usize {
        self.token_ids.len()
    }
}

/// Greedy argmax decoding until every row emits EOS or `max_len` steps pass.
/// Returns per-row token ids and the final coverage matrix values.
pub fn greedy_decode(
    tape: &Tape,
    w: &DecoderWeights,
    memory: &AttentionMemory<'_>,
    init: DecoderState,
    max_len: usize,
    variant: Variant,
) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
    let rows = memory.rows;
    let mut state = init;
    let mut coverage = Coverage::new(tape, rows, memory.width);
    let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); rows];
    let mut active = vec![true; rows];
    let mut input = tape.repeat_rows(w.start, rows)?;
    for t in 1..=max_len {
        let step = decode_step(
            tape,
            w,
            memory,
            input,
            state,
            &mut coverage,
            t,
            &active,
            variant,
        )?;
        state = step.state;
        let logits = tape.value(step.logits);
        let v = logits.shape()[1];
        let mut next = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &logits.data()[r * v..(r + 1) * v];
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &x)| if x > b.1 { (i, x) } else { b },
                )
                .0;
            if active[r] {
                tokens[r].push(best);
                if best == EOS {
                    active[r] = false;
                }
            }
            next.push(best);
        }
        drop(logits);
        if active.iter().all(|a| !a) {
            break;
        }
        input = tape.gather_rows(w.embedding, &next)?;
    }
    let cov = tape.to_vec(coverage.d);
    Ok((tokens, cov))
}
