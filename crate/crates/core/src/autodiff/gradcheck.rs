//! Central finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor in the relative error, so gradients that are zero
    /// on both routes compare by absolute difference.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, inputs: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    Ok(tape.item(out))
}

/// Compares the tape's gradient of the scalar `f` with central differences
/// `(f(x+h) - f(x-h)) / 2h` for every element of every input.
pub fn grad_check<F>(
    f: F,
    inputs: &[(String, Tensor)],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&tape, &vars)?;
    if !tape.item(out).is_finite() {
        return Err(Error::NonFinite(
            "gradient check at the unperturbed point".into(),
        ));
    }
    let grads = tape.backward(out)?;

    let mut probe: Vec<(String, Tensor)> = inputs.to_vec();
    let mut tensors = Vec::with_capacity(inputs.len());
    for (ti, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ti])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let mut check = TensorCheck {
            name: name.clone(),
            numel: tensor.numel(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            passed: true,
        };
        #[allow(clippy::needless_range_loop)]
        for i in 0..tensor.numel() {
            let base = tensor.data()[i];
            probe[ti].1.data_mut()[i] = base + cfg.step;
            let plus = evaluate(&f, &probe)?;
            probe[ti].1.data_mut()[i] = base - cfg.step;
            let minus = evaluate(&f, &probe)?;
            probe[ti].1.data_mut()[i] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check probe {name}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let rel = relative_error(analytic[i], numeric, cfg.abs_floor);
            check.max_abs_error = check.max_abs_error.max((analytic[i] - numeric).abs());
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
        }
        check.passed = check.max_rel_error < cfg.tol;
        tensors.push(check);
    }
    let passed = tensors.iter().all(|t| t.passed);
    Ok(GradCheckReport { tensors, passed })
}
