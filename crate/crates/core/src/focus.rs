//! Focus generator and the focus-guided coverage attention.
//!
//! The focus is a distribution over post positions obtained by attending the
//! latent `z` to the encoder states. Decoding attention reads the post states
//! augmented with their focus weight and, for the coverage variants, the
//! attention history `a_{t-1} = Σ_i d_{i,t-1} h'_i`.

use serde::Serialize;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::Variant;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct FocusWeights {
    /// `[d_h × d_attn]`
    pub w_f: Var,
    /// `[d_z × d_attn]`
    pub u_f: Var,
    /// `[d_attn × 1]`
    pub v_f: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    /// `[d_key × d_attn]`, `d_key` = `d_h + 1` with the focus column, `d_h` without.
    pub w_a: Var,
    /// `[d_h × d_attn]`
    pub u_a: Var,
    /// `[(d_h + 1) × d_attn]`, only for the coverage variants.
    pub v_a: Option<Var>,
    /// `[d_attn × 1]`
    pub v_a_out: Var,
}

/// `v^T tanh(rows W + repeat(query U))` reshaped to `[B × n]`.
fn additive_scores(
    tape: &Tape,
    keys: Var,
    query: Var,
    v: Var,
    rows: usize,
    width: usize,
) -> Result<Var> {
    let q = tape.repeat_rows(query, width)?;
    let hidden = tape.tanh(tape.add(keys, q)?);
    let scores = tape.matmul(hidden, v)?;
    tape.reshape(scores, &[rows, width])
}

/// `F = softmax_i(v_f^T tanh(W_f h_i + U_f z))` over unmasked positions, `[B × n]`.
pub fn focus_generate(
    tape: &Tape,
    states: Var,
    mask: &[bool],
    rows: usize,
    width: usize,
    z: Var,
    w: &FocusWeights,
) -> Result<Var> {
    let keys = tape.matmul(states, w.w_f)?;
    let query = tape.matmul(z, w.u_f)?;
    let scores = additive_scores(tape, keys, query, w.v_f, rows, width)?;
    tape.softmax(scores, Some(mask))
}

/// `h'_i = [h_i; f_i]`, `[B*n × (d_h + 1)]`.
pub fn augment_states(tape: &Tape, states: Var, focus: Var) -> Result<Var> {
    let rows = tape.shape(states)[0];
    let column = tape.reshape(focus, &[rows, 1])?;
    tape.concat_cols(&[states, column])
}

/// Accumulated attention per post position, `[B × n]`, with per-row step counts.
#[derive(Debug, Clone)]
pub struct Coverage {
    pub d: Var,
    /// Attention steps each row has taken while active.
    pub steps: Vec<usize>,
    taken: usize,
}

impl Coverage {
    pub fn new(tape: &Tape, rows: usize, width: usize) -> Self {
        Self {
            d: tape.constant(Tensor::zeros(&[rows, width])),
            steps: vec![0; rows],
            taken: 0,
        }
    }

    /// Global step: how many attention steps have been taken.
    pub fn step(&self) -> usize {
        self.taken
    }
}

/// Everything attention needs that does not change across decode steps.
#[derive(Debug, Clone)]
pub struct AttentionMemory<'m> {
    /// Rows fed to `W_a`: `h'` for focus variants, `h` for plain attention.
    pub keys_input: Var,
    /// `keys_input · W_a`, precomputed once.
    pub keys: Var,
    /// Rows summed into the context vector.
    pub context_rows: Var,
    pub mask: &'m [bool],
    pub rows: usize,
    pub width: usize,
}

impl<'m> AttentionMemory<'m> {
    pub fn new(
        tape: &Tape,
        keys_input: Var,
        context_rows: Var,
        mask: &'m [bool],
        rows: usize,
        width: usize,
        w: &AttentionWeights,
    ) -> Result<Self> {
        let keys = tape.matmul(keys_input, w.w_a)?;
        Ok(Self {
            keys_input,
            keys,
            context_rows,
            mask,
            rows,
            width,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttendOutput {
    pub alpha: Var,
    pub context: Var,
}

/// One decoding attention step `t` (1-based).
///
/// `e_{i,t} = v_a^T tanh(W_a h'_i + U_a s_{t-1} + V_a a_{t-1})`, `α_t` its
/// masked softmax, `context = Σ_i α_{i,t} c_i`. Rows with `active[b] ==
/// false` (already finished) leave their coverage untouched.
#[allow(clippy::too_many_arguments)]
pub fn attend_step(
    tape: &Tape,
    memory: &AttentionMemory<'_>,
    s_prev: Var,
    coverage: &mut Coverage,
    t: usize,
    active: &[bool],
    variant: Variant,
    w: &AttentionWeights,
) -> Result<AttendOutput> {
    if coverage.step() + 1 != t {
        return Err(Error::Sequencing {
            expected: t - 1,
            found: coverage.step(),
        });
    }
    let mut query = tape.matmul(s_prev, w.u_a)?;
    if variant.uses_coverage_attention() && t > 1 {
        let v_a = w
            .v_a
            .ok_or(Error::Config("coverage attention without V_a".into()))?;
        let history = tape.weighted_row_sum(coverage.d, memory.keys_input)?;
        query = tape.add(query, tape.matmul(history, v_a)?)?;
    }
    let scores = additive_scores(
        tape,
        memory.keys,
        query,
        w.v_a_out,
        memory.rows,
        memory.width,
    )?;
    let alpha = tape.softmax(scores, Some(memory.mask))?;
    let context = tape.weighted_row_sum(alpha, memory.context_rows)?;

    let added = if active.iter().all(|&a| a) {
        alpha
    } else {
        let gate: Vec<f64> = active
            .iter()
            .flat_map(|&a| std::iter::repeat_n(if a { 1.0 } else { 0.0 }, memory.width))
            .collect();
        let gate = tape.constant(Tensor::matrix(memory.rows, memory.width, gate)?);
        tape.mul(alpha, gate)?
    };
    coverage.d = tape.add(coverage.d, added)?;
    coverage.taken += 1;
    for (s, &a) in coverage.steps.iter_mut().zip(active) {
        if a {
            *s += 1;
        }
    }
    Ok(AttendOutput { alpha, context })
}

/// Focus against length-normalized coverage for one response.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub focus: Vec<f64>,
    pub coverage_over_len: Vec<f64>,
    /// `||D/|y| - F||_2`
    pub distance: f64,
    pub focus_argmax: usize,
    pub coverage_argmax: usize,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Builds the alignment record. `coverage` and `focus` cover the post's real positions.
pub fn coverage_report(coverage: &[f64], resp_len: usize, focus: &[f64]) -> Result<CoverageReport> {
    if resp_len == 0 {
        return Err(Error::Validation("response length must be positive".into()));
    }
    if coverage.len() != focus.len() {
        return Err(Error::dim(
            "coverage_report",
            &[coverage.len()],
            &[focus.len()],
        ));
    }
    let norm: Vec<f64> = coverage.iter().map(|d| d / resp_len as f64).collect();
    let distance = norm
        .iter()
        .zip(focus)
        .map(|(d, f)| (d - f).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(CoverageReport {
        focus_argmax: argmax(focus),
        coverage_argmax: argmax(&norm),
        focus: focus.to_vec(),
        coverage_over_len: norm,
        distance,
    })
}

impl CoverageReport {
    /// CSV with header `position,token,focus,coverage_over_len`.
    pub fn to_csv(&self, tokens: &[String]) -> String {
        let mut out = String::from("position,token,focus,coverage_over_len\n");
        for (i, (f, d)) in self.focus.iter().zip(&self.coverage_over_len).enumerate() {
            let tok = tokens.get(i).map_or("", String::as_str);
            out.push_str(&format!("{i},{tok},{f},{d}\n"));
        }
        out
    }
}
