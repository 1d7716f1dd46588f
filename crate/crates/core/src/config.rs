use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ablation ladder: plain attention, focus features, focus plus coverage
/// attention, and the full model with the focus constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(alias = "S2S", alias = "S2s")]
    S2s,
    #[serde(alias = "Foc")]
    Foc,
    #[serde(alias = "FocCoverage")]
    FocCoverage,
    #[serde(alias = "FocConstrain")]
    FocConstrain,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::S2s,
        Variant::Foc,
        Variant::FocCoverage,
        Variant::FocConstrain,
    ];

    /// Latent variable, focus generator, KL and bag-of-words terms.
    pub fn uses_latent(self) -> bool {
        self != Variant::S2s
    }

    /// The `V_a a_{t-1}` coverage term in the attention energy.
    pub fn uses_coverage_attention(self) -> bool {
        matches!(self, Variant::FocCoverage | Variant::FocConstrain)
    }

    pub fn uses_focus_constraint(self) -> bool {
        self == Variant::FocConstrain
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::S2s => "s2s",
            Variant::Foc => "foc",
            Variant::FocCoverage => "foccoverage",
            Variant::FocConstrain => "focconstrain",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Model shape and training hyperparameters.
///
/// Defaults are desk-scale. [`TrainConfig::paper_scale`] returns the
/// published settings (batch 1024, warmup 8000, peak 0.0008, width 720).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    /// Width of encoder states (forward and backward halves concatenated)
    /// and of the decoder GRU.
    pub d_h: usize,
    /// Latent size; also the word embedding size.
    pub d_z: usize,
    /// Hidden width of the focus and attention energy functions.
    pub d_attn: usize,
    /// Hidden width of the bag-of-words predictor.
    pub d_bow: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub kl_anneal_steps: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub sample_seed: u64,
    pub log_var_min: f64,
    pub log_var_max: f64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Parameters start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Global-norm gradient clipping; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Condition the decoder's initial state on z as well as the post summary.
    pub z_to_decoder_init: bool,
    /// Use the focus-augmented states in the attention context sum.
    pub context_uses_augmented: bool,
    pub seq_weight: f64,
    pub foc_weight: f64,
    pub bow_weight: f64,
    /// Latent samples averaged per pair per step.
    pub latent_samples: usize,
    pub max_post_len: usize,
    pub max_resp_len: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FocConstrain,
            vocab_size: 64,
            d_h: 64,
            d_z: 32,
            d_attn: 64,
            d_bow: 64,
            batch_size: 32,
            total_steps: 3000,
            warmup_steps: 200,
            peak_lr: 0.002,
            kl_anneal_steps: 500,
            init_seed: 1,
            shuffle_seed: 2,
            sample_seed: 3,
            log_var_min: -10.0,
            log_var_max: 10.0,
            checkpoint_interval: 0,
            init_scale: 0.08,
            grad_clip: Some(5.0),
            z_to_decoder_init: true,
            context_uses_augmented: false,
            seq_weight: 1.0,
            foc_weight: 1.0,
            bow_weight: 1.0,
            latent_samples: 1,
            max_post_len: 32,
            max_resp_len: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            vocab_size: 50_003,
            d_h: 720,
            d_z: 720,
            d_attn: 720,
            d_bow: 720,
            batch_size: 1024,
            warmup_steps: 8000,
            peak_lr: 0.0008,
            init_scale: 1.0,
            ..Self::default()
        }
    }

    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.d_h < 2 || !self.d_h.is_multiple_of(2) {
            return fail(format!("d_h must be even and >= 2, got {}", self.d_h));
        }
        if self.d_z == 0 || self.d_attn == 0 || self.d_bow == 0 {
            return fail("d_z, d_attn and d_bow must be positive".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if self.warmup_steps < 1 {
            return fail("warmup_steps must be at least 1".into());
        }
        if self.kl_anneal_steps < 1 {
            return fail("kl_anneal_steps must be at least 1".into());
        }
        if !(self.peak_lr > 0.0) {
            return fail(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.log_var_min < self.log_var_max) {
            return fail("log_var_min must be below log_var_max".into());
        }
        if !(self.init_scale > 0.0) {
            return fail("init_scale must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail("grad_clip must be positive".into());
            }
        }
        if self.latent_samples < 1 {
            return fail("latent_samples must be at least 1".into());
        }
        if self.max_post_len < 1 || self.max_resp_len < 1 {
            return fail("maximum lengths must be positive".into());
        }
        Ok(())
    }

    /// Canonical JSON: keys sorted, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn max_decode_len(&self) -> usize {
        2 * self.max_resp_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_round_trips_through_strings() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"d_h": 8, "nope": 1}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"d_h": 8}"#).unwrap();
        assert_eq!(ok.d_h, 8);
        assert_eq!(ok.d_z, 32);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let json = TrainConfig::default().to_canonical_json();
        let keys: Vec<&str> = json
            .trim_matches(|c| c == '{' || c == '}')
            .split(',')
            .map(|kv| kv.split(':').next().unwrap())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.warmup_steps = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            d_h: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
