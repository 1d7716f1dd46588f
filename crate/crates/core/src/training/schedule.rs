use crate::error::{Error, Result};

/// KL weight `min(1, step / anneal_steps)`.
pub fn kl_anneal(step: u64, anneal_steps: u64) -> Result<f64> {
    if anneal_steps < 1 {
        return Err(Error::Config("kl anneal steps must be at least 1".into()));
    }
    Ok((step as f64 / anneal_steps as f64).min(1.0))
}

/// Linear warmup to `peak`, then inverse square-root decay. `step` is 1-based.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    if step <= warmup {
        peak * step / warmup
    } else {
        peak * (warmup / step).sqrt()
    }
}
