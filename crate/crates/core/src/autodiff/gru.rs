use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Handles to one GRU cell's parameters on a tape.
///
/// Input weights are `[d_in × d_h]`, recurrent weights `[d_h × d_h]`, biases
/// `[1 × d_h]`; states are batched as rows.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_update: Var,
    pub w_reset: Var,
    pub w_cand: Var,
    pub u_update: Var,
    pub u_reset: Var,
    pub u_cand: Var,
    pub b_update: Var,
    pub b_reset: Var,
    pub b_cand: Var,
}

pub const GRU_PARAM_NAMES: [&str; 9] = [
    "W_u", "W_r", "W_h", "U_u", "U_r", "U_h", "b_u", "b_r", "b_h",
];

impl GruWeights {
    /// Builds from handles in [`GRU_PARAM_NAMES`] order.
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_update: v[0],
            w_reset: v[1],
            w_cand: v[2],
            u_update: v[3],
            u_reset: v[4],
            u_cand: v[5],
            b_update: v[6],
            b_reset: v[7],
            b_cand: v[8],
        }
    }
}

/// One GRU step:
///
/// ```text
/// u  = σ(x W_u + h U_u + b_u)
/// r  = σ(x W_r + h U_r + b_r)
/// ĥ  = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 − u) ⊙ h + u ⊙ ĥ
/// ```
pub fn gru_cell(tape: &Tape, x: Var, h_prev: Var, w: &GruWeights) -> Result<Var> {
    let d_in = tape.shape(w.w_update)[0];
    let d_h = tape.shape(w.u_update)[0];
    let xs = tape.shape(x);
    let hs = tape.shape(h_prev);
    if xs.len() != 2 || xs[1] != d_in || hs.len() != 2 || hs[1] != d_h || xs[0] != hs[0] {
        return Err(Error::dim("gru_cell", &xs, &hs));
    }

    let gate = |wx: Var, uh: Var, b: Var, h: Var| -> Result<Var> {
        let xw = tape.matmul(x, wx)?;
        let hu = tape.matmul(h, uh)?;
        tape.add_row(tape.add(xw, hu)?, b)
    };
    let update = tape.sigmoid(gate(w.w_update, w.u_update, w.b_update, h_prev)?);
    let reset = tape.sigmoid(gate(w.w_reset, w.u_reset, w.b_reset, h_prev)?);
    let gated = tape.mul(reset, h_prev)?;
    let cand = tape.tanh(gate(w.w_cand, w.u_cand, w.b_cand, gated)?);
    let delta = tape.sub(cand, h_prev)?;
    tape.add(h_prev, tape.mul(update, delta)?)
}
