//! A tiny fully-specified model and batch for gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport};
use crate::config::{TrainConfig, Variant};
use crate::corpus::{Batch, PostResponsePair, Vocabulary, EOS};
use crate::error::Result;
use crate::model::FocusCvae;

pub const MICRO_POST_LEN: usize = 3;
pub const MICRO_RESP_LEN: usize = 4;
pub const MICRO_BATCH: usize = 2;

/// Vocabulary of 7: the three reserved entries plus `w0..w3`.
pub fn micro_vocab() -> Vocabulary {
    Vocabulary::new((0..4).map(|i| format!("w{i}"))).expect("valid vocabulary")
}

pub fn micro_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        vocab_size: 7,
        d_h: 4,
        d_z: 4,
        d_attn: 4,
        d_bow: 4,
        batch_size: MICRO_BATCH,
        init_scale: 0.5,
        ..TrainConfig::default()
    }
}

/// Two pairs: a full-width one (`|x| = 3`, `|y| = 4`) and a shorter one so
/// masking is exercised.
pub fn micro_pairs(seed: u64) -> Vec<PostResponsePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut word = || rng.random_range(3..7);
    let full = PostResponsePair {
        post: (0..MICRO_POST_LEN).map(|_| word()).collect(),
        response: (0..MICRO_RESP_LEN - 1)
            .map(|_| word())
            .chain([EOS])
            .collect(),
        gold_focus_slot: None,
        post_index: 0,
    };
    let short = PostResponsePair {
        post: (0..MICRO_POST_LEN - 1).map(|_| word()).collect(),
        response: (0..MICRO_RESP_LEN - 2)
            .map(|_| word())
            .chain([EOS])
            .collect(),
        gold_focus_slot: None,
        post_index: 1,
    };
    vec![full, short]
}

pub fn micro_batch(seed: u64) -> Batch {
    let pairs = micro_pairs(seed);
    let refs: Vec<&PostResponsePair> = pairs.iter().collect();
    Batch::from_pairs(&refs).expect("micro batch")
}

/// Central-difference check of the total objective against every parameter
/// of the micro model. The latent noise is redrawn from the same seed at
/// every probe so the objective is a deterministic function of the weights.
pub fn micro_gradcheck(
    variant: Variant,
    seed: u64,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let config = TrainConfig {
        init_seed: seed,
        ..micro_config(variant)
    };
    let model = FocusCvae::new(config, micro_vocab())?;
    let batch = micro_batch(seed);
    let inputs: Vec<(String, crate::autodiff::Tensor)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.clone()))
        .collect();
    grad_check(
        |tape, vars| {
            let bound = model.bind_vars(vars.to_vec());
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let fwd = model.forward_train(tape, &bound, &batch, 0.5, &mut rng)?;
            Ok(fwd.total)
        },
        &inputs,
        cfg,
    )
}
