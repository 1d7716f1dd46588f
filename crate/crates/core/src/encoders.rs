//! Shared bidirectional GRU encoder, recognition and prior networks,
//! reparameterized sampling and the Gaussian KL term.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gru_cell, GruWeights, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weights of the two stacked bidirectional layers: `[layer][direction]`,
/// direction 0 reading left to right.
#[derive(Debug, Clone, Copy)]
pub struct EncoderWeights {
    pub embedding: Var,
    pub layers: [[GruWeights; 2]; 2],
}

/// Per-position states `[B*n × d_h]` (row `b*n + i`) and their masked mean `[B × d_h]`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutputs {
    pub states: Var,
    pub summary: Var,
    pub rows: usize,
    pub width: usize,
}

/// Expands a `[B × n]` boolean mask column into a `[B × d]` 0/1 constant.
pub(crate) fn column_mask(
    mask: &[bool],
    rows: usize,
    width: usize,
    col: usize,
    d: usize,
) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let m = if mask[r * width + col] { 1.0 } else { 0.0 };
        data.extend(std::iter::repeat_n(m, d));
    }
    Tensor::matrix(rows, d, data).expect("mask shape")
}

/// Runs one GRU direction over `inputs`; rows whose position is masked keep
/// their previous state, so the backward direction starts at each row's last token.
fn run_direction(
    tape: &Tape,
    inputs: &[Var],
    mask: &[bool],
    rows: usize,
    width: usize,
    w: &GruWeights,
    reverse: bool,
) -> Result<Vec<Var>> {
    let d_h = tape.shape(w.u_update)[0];
    let mut h = tape.constant(Tensor::zeros(&[rows, d_h]));
    let mut outs = vec![h; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        let cand = gru_cell(tape, inputs[t], h, w)?;
        let all_live = (0..rows).all(|r| mask[r * width + t]);
        h = if all_live {
            cand
        } else {
            let m = tape.constant(column_mask(mask, rows, width, t, d_h));
            let delta = tape.sub(cand, h)?;
            tape.add(h, tape.mul(m, delta)?)?
        };
        outs[t] = h;
    }
    Ok(outs)
}

/// Encodes a padded `[rows × width]` id matrix.
///
/// Position `i` of layer `l` is `[forward_i; backward_i]`; the second layer
/// reads the first layer's outputs.
pub fn encode(
    tape: &Tape,
    w: &EncoderWeights,
    ids: &[usize],
    mask: &[bool],
    rows: usize,
    width: usize,
) -> Result<EncoderOutputs> {
    if rows == 0 || width == 0 {
        return Err(Error::Validation("cannot encode an empty sequence".into()));
    }
    let lengths: Vec<usize> = (0..rows)
        .map(|r| {
            mask[r * width..(r + 1) * width]
                .iter()
                .filter(|&&m| m)
                .count()
        })
        .collect();
    if lengths.contains(&0) {
        return Err(Error::Validation("cannot encode an empty sequence".into()));
    }

    let mut inputs: Vec<Var> = (0..width)
        .map(|t| {
            let col: Vec<usize> = (0..rows).map(|r| ids[r * width + t]).collect();
            tape.gather_rows(w.embedding, &col)
        })
        .collect::<Result<_>>()?;

    for layer in &w.layers {
        let fwd = run_direction(tape, &inputs, mask, rows, width, &layer[0], false)?;
        let bwd = run_direction(tape, &inputs, mask, rows, width, &layer[1], true)?;
        inputs = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| tape.concat_cols(&[f, b]))
            .collect::<Result<_>>()?;
    }

    let d_h = tape.shape(inputs[0])[1];
    let joined = tape.concat_cols(&inputs)?;
    let states = tape.reshape(joined, &[rows * width, d_h])?;

    let mut weights = vec![0.0; rows * width];
    for r in 0..rows {
        for c in 0..width {
            if mask[r * width + c] {
                weights[r * width + c] = 1.0 / lengths[r] as f64;
            }
        }
    }
    let pool = tape.constant(Tensor::matrix(rows, width, weights)?);
    let summary = tape.weighted_row_sum(pool, states)?;
    Ok(EncoderOutputs {
        states,
        summary,
        rows,
        width,
    })
}

/// Mean and clamped log-variance of a diagonal Gaussian, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianHead {
    pub weight: Var,
    pub bias: Var,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

fn gaussian_head(tape: &Tape, input: Var, head: &GaussianHead) -> Result<GaussianVars> {
    let out = tape.add_row(tape.matmul(input, head.weight)?, head.bias)?;
    let two_dz = tape.shape(out)[1];
    if !two_dz.is_multiple_of(2) {
        return Err(Error::dim("gaussian_head", &tape.shape(out), &[2]));
    }
    let d_z = two_dz / 2;
    let mu = tape.slice_cols(out, 0, d_z)?;
    let raw = tape.slice_cols(out, d_z, two_dz)?;
    let log_var = tape.clamp(raw, head.log_var_min, head.log_var_max);
    Ok(GaussianVars { mu, log_var })
}

/// `[mu; log_var] = W_q [h̄_x; h̄_y] + b_q`. Needs the response summary, so
/// it is only available while training.
pub fn recognition(
    tape: &Tape,
    post_summary: Var,
    response_summary: Option<Var>,
    head: &GaussianHead,
) -> Result<GaussianVars> {
    let resp = response_summary.ok_or(Error::Phase(
        "recognition network needs a response; use the prior at inference",
    ))?;
    let joined = tape.concat_cols(&[post_summary, resp])?;
    gaussian_head(tape, joined, head)
}

/// `[mu'; log_var'] = W_p h̄_x + b_p`, conditioned on the post only.
pub fn prior(tape: &Tape, post_summary: Var, head: &GaussianHead) -> Result<GaussianVars> {
    gaussian_head(tape, post_summary, head)
}

/// `z = mu + exp(0.5 log_var) ⊙ eps` with `eps` held constant.
pub fn sample_with_eps(tape: &Tape, params: &GaussianVars, eps: Tensor) -> Result<Var> {
    let eps = tape.constant(eps);
    let std = tape.exp(tape.scale(params.log_var, 0.5));
    tape.add(params.mu, tape.mul(std, eps)?)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Draws eps from `rng` and reparameterizes. Returns `(z, eps)`.
pub fn sample<R: Rng + ?Sized>(
    tape: &Tape,
    params: &GaussianVars,
    rng: &mut R,
) -> Result<(Var, Tensor)> {
    let shape = tape.shape(params.mu);
    let eps = standard_normal(rng, &shape);
    let z = sample_with_eps(tape, params, eps.clone())?;
    Ok((z, eps))
}

/// Per-row `KL(q || p)` for diagonal Gaussians, `[B × 1]`.
pub fn kl_divergence(tape: &Tape, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    // 0.5 (lv_p - lv_q) + (exp(lv_q) + (mu_q - mu_p)^2) / (2 exp(lv_p)) - 0.5
    let log_ratio = tape.sub(p.log_var, q.log_var)?;
    let diff = tape.sub(q.mu, p.mu)?;
    let spread = tape.add(tape.exp(q.log_var), tape.mul(diff, diff)?)?;
    let inv_var_p = tape.exp(tape.neg(p.log_var));
    let quad = tape.mul(spread, inv_var_p)?;
    let terms = tape.add_const(tape.scale(tape.add(log_ratio, quad)?, 0.5), -0.5);
    Ok(tape.row_sum(terms))
}

/// Plain-value diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    Recognition,
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub source: LatentSource,
}

impl GaussianParams {
    pub fn standard(d_z: usize) -> Self {
        Self {
            mu: vec![0.0; d_z],
            log_var: vec![0.0; d_z],
        }
    }

    pub fn clamped(mut self, lo: f64, hi: f64) -> Self {
        self.log_var.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        self
    }

    pub fn sample(&self, eps: &[f64], source: LatentSource) -> LatentSample {
        let z = self
            .mu
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        LatentSample {
            z,
            eps: eps.to_vec(),
            source,
        }
    }

    pub fn kl(&self, p: &GaussianParams) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(p.mu.iter().zip(&p.log_var))
            .map(|((mq, lq), (mp, lp))| {
                0.5 * (lp - lq) + (lq.exp() + (mq - mp).powi(2)) / (2.0 * lp.exp()) - 0.5
            })
            .sum()
    }
}
