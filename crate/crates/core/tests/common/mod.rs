#![allow(dead_code)]

use fcvae::autodiff::Tensor;
use fcvae::corpus::{Batch, PostResponsePair, EOS};
use fcvae::micro::{micro_config, micro_vocab};
use fcvae::{FocusCvae, TrainConfig, Variant};
use rand::Rng;

pub const LATENT_VARIANTS: [Variant; 3] =
    [Variant::Foc, Variant::FocCoverage, Variant::FocConstrain];
pub const ALL_VARIANTS: [Variant; 4] = [
    Variant::S2s,
    Variant::Foc,
    Variant::FocCoverage,
    Variant::FocConstrain,
];

pub fn micro_model(variant: Variant, seed: u64) -> FocusCvae {
    let config = TrainConfig {
        init_seed: seed,
        ..micro_config(variant)
    };
    FocusCvae::new(config, micro_vocab()).unwrap()
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Random pairs over the micro vocabulary (word ids 3..7).
pub fn random_pairs<R: Rng>(
    rng: &mut R,
    n: usize,
    max_post: usize,
    max_resp: usize,
) -> Vec<PostResponsePair> {
    (0..n)
        .map(|i| {
            let lp = rng.random_range(1..=max_post);
            let lr = rng.random_range(1..=max_resp);
            PostResponsePair {
                post: (0..lp).map(|_| rng.random_range(3..7)).collect(),
                response: (0..lr - 1)
                    .map(|_| rng.random_range(3..7))
                    .chain([EOS])
                    .collect(),
                gold_focus_slot: None,
                post_index: i,
            }
        })
        .collect()
}

pub fn batch_of(pairs: &[PostResponsePair]) -> Batch {
    let refs: Vec<&PostResponsePair> = pairs.iter().collect();
    Batch::from_pairs(&refs).unwrap()
}
