mod common;

use common::{batch_of, micro_model, random_pairs, ALL_VARIANTS, LATENT_VARIANTS};
use fcvae::autodiff::Tape;
use fcvae::corpus::{Batch, EOS, PAD};
use fcvae::encoders::{encode, kl_divergence, prior};
use fcvae::training::breakdown;
use fcvae::{FocusCvae, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(variant: Variant, seed: u64) -> (FocusCvae, Batch) {
    let model = micro_model(variant, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let n = 1 + (seed % 4) as usize;
    (model, batch_of(&random_pairs(&mut rng, n, 5, 6)))
}

fn forward_values(
    model: &FocusCvae,
    batch: &Batch,
    gamma: f64,
    seed: u64,
) -> fcvae::training::LossBreakdown {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fwd = model
        .forward_train(&tape, &bound, batch, gamma, &mut rng)
        .unwrap();
    breakdown(&tape, &fwd)
}

/// Widens a batch with extra all-PAD columns on both sides.
fn widen(b: &Batch, extra_post: usize, extra_resp: usize) -> Batch {
    let grow = |ids: &[usize], mask: &[bool], w: usize, extra: usize| {
        let mut out_ids = Vec::new();
        let mut out_mask = Vec::new();
        for r in 0..b.rows {
            out_ids.extend_from_slice(&ids[r * w..(r + 1) * w]);
            out_ids.extend(std::iter::repeat_n(PAD, extra));
            out_mask.extend_from_slice(&mask[r * w..(r + 1) * w]);
            out_mask.extend(std::iter::repeat_n(false, extra));
        }
        (out_ids, out_mask)
    };
    let (post_ids, post_mask) = grow(&b.post_ids, &b.post_mask, b.post_width, extra_post);
    let (resp_ids, resp_mask) = grow(&b.resp_ids, &b.resp_mask, b.resp_width, extra_resp);
    Batch {
        post_width: b.post_width + extra_post,
        resp_width: b.resp_width + extra_resp,
        post_ids,
        post_mask,
        resp_ids,
        resp_mask,
        ..b.clone()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn focus_and_attention_are_masked_distributions(seed in any::<u64>(), v in 0usize..4) {
        let (model, batch) = setup(ALL_VARIANTS[v], seed);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fwd = model.forward_train(&tape, &bound, &batch, 1.0, &mut rng).unwrap();
        let w = batch.post_width;
        let mut dists: Vec<Vec<f64>> = fwd.alphas.iter().map(|&a| tape.to_vec(a)).collect();
        if let Some(f) = fwd.focus {
            dists.push(tape.to_vec(f));
        }
        for d in &dists {
            for r in 0..batch.rows {
                let row = &d[r * w..(r + 1) * w];
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for (c, &x) in row.iter().enumerate() {
                    if batch.post_mask[r * w + c] {
                        prop_assert!(x > 0.0);
                    } else {
                        prop_assert_eq!(x, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_accumulates_once_per_response_token(seed in any::<u64>(), v in 0usize..4) {
        let (model, batch) = setup(ALL_VARIANTS[v], seed);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fwd = model.forward_train(&tape, &bound, &batch, 1.0, &mut rng).unwrap();
        let w = batch.post_width;
        let mut prev = vec![0.0; batch.rows * w];
        for &c in &fwd.coverage_trace {
            let cur = tape.to_vec(c);
            for (a, b) in prev.iter().zip(&cur) {
                prop_assert!(b >= a);
            }
            prev = cur;
        }
        let fin = tape.to_vec(fwd.coverage);
        prop_assert_eq!(&fin, &prev);
        for r in 0..batch.rows {
            let s: f64 = fin[r * w..(r + 1) * w].iter().sum();
            prop_assert!((s - batch.resp_lengths[r] as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_terms_recompose_and_kl_is_nonnegative(seed in any::<u64>(), v in 0usize..4, gamma in 0.0f64..1.0) {
        let (model, batch) = setup(ALL_VARIANTS[v], seed);
        let l = forward_values(&model, &batch, gamma, seed);
        prop_assert!(close(l.total, l.l_seq + gamma * l.l_kl + l.l_foc + l.l_bow, 1e-12));
        prop_assert!(l.l_kl >= 0.0);
        prop_assert!(l.l_foc >= 0.0 && l.l_bow >= 0.0 && l.l_seq > 0.0);
        if ALL_VARIANTS[v] == Variant::S2s {
            prop_assert_eq!((l.l_foc, l.l_kl, l.l_bow), (0.0, 0.0, 0.0));
        }
        if ALL_VARIANTS[v] != Variant::FocConstrain {
            prop_assert_eq!(l.l_foc, 0.0);
        }
    }

    #[test]
    fn padding_columns_do_not_change_losses(seed in any::<u64>(), v in 0usize..4, ep in 0usize..3, er in 0usize..3) {
        let (model, batch) = setup(ALL_VARIANTS[v], seed);
        let a = forward_values(&model, &batch, 0.7, seed);
        let b = forward_values(&model, &widen(&batch, ep, er), 0.7, seed);
        for (x, y) in [(a.total, b.total), (a.l_seq, b.l_seq), (a.l_kl, b.l_kl), (a.l_foc, b.l_foc), (a.l_bow, b.l_bow)] {
            prop_assert!(close(x, y, 1e-12), "{} vs {}", x, y);
        }
    }

    #[test]
    fn prior_ignores_the_response(seed in any::<u64>(), v in 0usize..3) {
        let (model, batch) = setup(LATENT_VARIANTS[v], seed);
        let mut other = batch.clone();
        for (id, &m) in other.resp_ids.iter_mut().zip(&other.resp_mask) {
            if m && *id != EOS {
                *id = 3 + (*id + 1) % 4;
            }
        }
        let prior_of = |b: &Batch| {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let fwd = model.forward_train(&tape, &bound, b, 1.0, &mut rng).unwrap();
            let p = fwd.prior.unwrap();
            (tape.to_vec(p.mu), tape.to_vec(p.log_var))
        };
        prop_assert_eq!(prior_of(&batch), prior_of(&other));
    }

    #[test]
    fn decoder_is_causal(seed in any::<u64>(), j in 0usize..5) {
        // the plain variant has no latent path reading the whole response
        let (model, batch) = setup(Variant::S2s, seed);
        prop_assume!(j < batch.resp_width);
        let mut other = batch.clone();
        for r in 0..other.rows {
            let i = r * other.resp_width + j;
            if other.resp_mask[i] {
                other.resp_ids[i] = 3 + (other.resp_ids[i] + 2) % 4;
            }
        }
        let logits = |b: &Batch| {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fwd = model.forward_train(&tape, &bound, b, 1.0, &mut rng).unwrap();
            fwd.logits.iter().map(|&l| tape.to_vec(l)).collect::<Vec<_>>()
        };
        let (a, b) = (logits(&batch), logits(&other));
        for t in 0..=j {
            prop_assert_eq!(&a[t], &b[t]);
        }
    }

    #[test]
    fn generation_respects_length_bound(seed in any::<u64>(), v in 0usize..4, max_len in 1usize..8) {
        let (model, batch) = setup(ALL_VARIANTS[v], seed);
        let posts: Vec<Vec<usize>> = (0..batch.rows).map(|r| batch.post_row(r).to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.generate(&posts, 2, &mut rng, max_len).unwrap();
        prop_assert_eq!(out.len(), posts.len() * 2);
        for (i, g) in out.iter().enumerate() {
            prop_assert!(!g.token_ids.is_empty() && g.token_ids.len() <= max_len);
            let eos = g.token_ids.iter().position(|&t| t == EOS);
            prop_assert!(eos.is_none() || eos == Some(g.token_ids.len() - 1));
            let len = posts[i / 2].len();
            prop_assert_eq!(g.coverage_final.len(), len);
            let s: f64 = g.coverage_final.iter().sum();
            prop_assert!((s - g.steps() as f64).abs() < 1e-10);
            if let Some(f) = &g.focus {
                prop_assert_eq!(f.len(), len);
            }
        }
    }

    #[test]
    fn encoder_pools_and_holds_state_under_padding(seed in any::<u64>(), extra in 1usize..3) {
        let (model, batch) = setup(Variant::Foc, seed);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let wide = widen(&batch, extra, 0);
        let a = encode(&tape, &bound.encoder, &batch.post_ids, &batch.post_mask, batch.rows, batch.post_width).unwrap();
        let b = encode(&tape, &bound.encoder, &wide.post_ids, &wide.post_mask, wide.rows, wide.post_width).unwrap();
        let (sa, sb) = (tape.to_vec(a.summary), tape.to_vec(b.summary));
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!(close(*x, *y, 1e-12));
        }
        // summary is the mean of the valid states
        let states = tape.to_vec(a.states);
        let d = sa.len() / batch.rows;
        for r in 0..batch.rows {
            let len = batch.post_lengths[r];
            for k in 0..d {
                let mean: f64 = (0..len).map(|c| states[(r * batch.post_width + c) * d + k]).sum::<f64>() / len as f64;
                prop_assert!(close(mean, sa[r * d + k], 1e-12));
            }
        }
    }
}

#[test]
fn kl_of_identical_gaussians_is_zero() {
    let (model, batch) = setup(Variant::FocConstrain, 4);
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let enc = model.encode_posts(&tape, &bound, &batch).unwrap();
    let p = prior(&tape, enc.summary, bound.prior.as_ref().unwrap()).unwrap();
    let kl = tape.to_vec(kl_divergence(&tape, &p, &p).unwrap());
    assert!(kl.iter().all(|&k| k.abs() < 1e-15), "{kl:?}");
}

#[test]
fn plain_variant_generation_ignores_the_rng() {
    let (model, batch) = setup(Variant::S2s, 11);
    let posts: Vec<Vec<usize>> = (0..batch.rows)
        .map(|r| batch.post_row(r).to_vec())
        .collect();
    let a = model
        .generate(&posts, 3, &mut ChaCha8Rng::seed_from_u64(1), 6)
        .unwrap();
    let b = model
        .generate(&posts, 3, &mut ChaCha8Rng::seed_from_u64(2), 6)
        .unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|g| g.focus.is_none() && g.z_source.is_none()));
}

#[test]
fn post_and_response_share_the_encoder() {
    let model = micro_model(Variant::Foc, 2);
    let seq = [3usize, 5, 4, 6];
    let pair = fcvae::corpus::PostResponsePair {
        post: seq.to_vec(),
        response: seq.to_vec(),
        gold_focus_slot: None,
        post_index: 0,
    };
    let batch = batch_of(&[pair]);
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let x = encode(
        &tape,
        &bound.encoder,
        &batch.post_ids,
        &batch.post_mask,
        1,
        4,
    )
    .unwrap();
    let y = encode(
        &tape,
        &bound.encoder,
        &batch.resp_ids,
        &batch.resp_mask,
        1,
        4,
    )
    .unwrap();
    assert_eq!(tape.to_vec(x.summary), tape.to_vec(y.summary));
}

#[test]
fn single_token_post_has_its_state_as_summary() {
    let model = micro_model(Variant::Foc, 8);
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let enc = encode(&tape, &bound.encoder, &[4, PAD], &[true, false], 1, 2).unwrap();
    let states = tape.to_vec(enc.states);
    let d = states.len() / 2;
    assert_eq!(tape.to_vec(enc.summary), states[..d].to_vec());
}

#[test]
fn first_state_sees_the_last_token() {
    let model = micro_model(Variant::Foc, 6);
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let first = |ids: &[usize]| {
        let s = tape.to_vec(
            encode(&tape, &bound.encoder, ids, &[true; 4], 1, 4)
                .unwrap()
                .states,
        );
        s[..s.len() / 4].to_vec()
    };
    assert_ne!(first(&[3, 6, 4, 5]), first(&[3, 6, 4, 3]));
}

#[test]
fn palindrome_mirrors_directions_under_tied_weights() {
    let mut model = micro_model(Variant::Foc, 6);
    for name in [
        "W_u", "W_r", "W_h", "U_u", "U_r", "U_h", "b_u", "b_r", "b_h",
    ] {
        for layer in 0..2 {
            let mut t = model
                .params
                .get(&format!("encoder.l{layer}.fwd.{name}"))
                .unwrap()
                .clone();
            if layer == 1 && name.starts_with('W') {
                // the second layer reads [fwd; bwd], so its tie swaps the input halves
                let (rows, cols) = t.dims2();
                let d = t.data().to_vec();
                let half = rows / 2;
                for r in 0..rows {
                    let src = (r + half) % rows;
                    t.data_mut()[r * cols..(r + 1) * cols]
                        .copy_from_slice(&d[src * cols..(src + 1) * cols]);
                }
            }
            *model
                .params
                .get_mut(&format!("encoder.l{layer}.bwd.{name}"))
                .unwrap() = t;
        }
    }
    let seq = [3usize, 5, 3];
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let s = tape.to_vec(
        encode(&tape, &bound.encoder, &seq, &[true; 3], 1, 3)
            .unwrap()
            .states,
    );
    let d = s.len() / 3;
    let half = d / 2;
    let fwd: Vec<&[f64]> = (0..3).map(|t| &s[t * d..t * d + half]).collect();
    let bwd: Vec<&[f64]> = (0..3).map(|t| &s[t * d + half..(t + 1) * d]).collect();
    for t in 0..3 {
        for k in 0..half {
            assert!(close(fwd[t][k], bwd[2 - t][k], 1e-12), "t={t} k={k}");
        }
    }
}
