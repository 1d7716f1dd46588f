use std::collections::HashSet;

use fcvae::corpus::{
    associate, generate_synthetic, is_keyword, make_batches, strip_special, Dataset,
    PostResponsePair, SynthConfig, Vocabulary, EOS, PAD, UNK,
};
use fcvae::Error;
use proptest::prelude::*;

#[test]
fn gold_slots_are_uniform_over_positions() {
    let cfg = SynthConfig::default();
    let (ds, vocab) = generate_synthetic(7, 10_000, &cfg).unwrap();
    let pairs = ds.encode(&vocab);
    let mut counts = vec![0usize; cfg.post_len];
    for p in &pairs {
        counts[p.gold_focus_slot.unwrap()] += 1;
    }
    let expected = 1.0 / cfg.post_len as f64;
    for (pos, &c) in counts.iter().enumerate() {
        let frac = c as f64 / pairs.len() as f64;
        assert!((frac - expected).abs() <= 0.02, "position {pos}: {frac}");
    }
}

#[test]
fn responses_elaborate_the_gold_keyword() {
    let (ds, _) = generate_synthetic(11, 3_000, &SynthConfig::default()).unwrap();
    for e in &ds.entries {
        assert_eq!(e.post.iter().filter(|t| is_keyword(t)).count(), 2);
        for (resp, &slot) in e.responses.iter().zip(e.gold_focus_slot.as_ref().unwrap()) {
            let kw = &e.post[slot];
            assert!(is_keyword(kw));
            assert_eq!(&resp[1], kw);
            let idx: usize = kw[2..].parse().unwrap();
            assert_eq!(resp[2], associate(idx));
        }
    }
}

#[test]
fn jsonl_round_trip_is_byte_identical() {
    let (ds, _) = generate_synthetic(5, 300, &SynthConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    ds.save_jsonl(&path).unwrap();
    let back = Dataset::load_jsonl(&path).unwrap();
    assert_eq!(back, ds);
    let path2 = dir.path().join("d.jsonl");
    back.save_jsonl(&path2).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn malformed_lines_report_their_number() {
    let text =
        "{\"post\":[\"a\"],\"responses\":[[\"b\"]]}\n{\"post\":[],\"responses\":[[\"b\"]]}\n";
    match Dataset::read_jsonl(text.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    let bad_slot = "{\"post\":[\"a\"],\"responses\":[[\"b\"]],\"gold_focus_slot\":[3]}\n";
    assert!(matches!(
        Dataset::read_jsonl(bad_slot.as_bytes()),
        Err(Error::Parse { line: 1, .. })
    ));
}

#[test]
fn tail_split_holds_out_whole_posts() {
    let (ds, _) = generate_synthetic(7, 900, &SynthConfig::default()).unwrap();
    let (head, tail) = ds.split_tail(50);
    assert_eq!(tail.n_posts(), 50);
    assert_eq!(head.n_posts() + 50, ds.n_posts());
    assert_eq!(head.n_pairs() + tail.n_pairs(), 900);
    let head_posts: HashSet<_> = head.entries.iter().map(|e| &e.post).collect();
    assert!(tail.entries.iter().all(|e| !head_posts.contains(&e.post)));
}

#[test]
fn unknown_tokens_map_to_unk() {
    let vocab = Vocabulary::new(["a", "b"]).unwrap();
    assert_eq!(vocab.encode(&["a", "zzz", "b"]), vec![3, UNK, 4]);
}

fn token_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{1,4}", 1..20)
}

proptest! {
    #[test]
    fn encode_then_decode_is_identity(tokens in token_strategy(), seq in prop::collection::vec(0usize..20, 0..12)) {
        let vocab = Vocabulary::new(&tokens).unwrap();
        let known: Vec<&str> = seq.iter().map(|&i| tokens[i % tokens.len()].as_str()).collect();
        let ids = vocab.encode(&known);
        prop_assert_eq!(vocab.decode(&ids), known.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        prop_assert!(ids.iter().all(|&i| i > EOS && i < vocab.len()));
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, vocab);
    }

    #[test]
    fn batches_cover_every_pair_with_consistent_masks(
        lens in prop::collection::vec((1usize..7, 1usize..7), 1..40),
        bs in 1usize..9,
        seed in proptest::option::of(any::<u64>()),
    ) {
        let pairs: Vec<PostResponsePair> = lens
            .iter()
            .enumerate()
            .map(|(i, &(lp, lr))| PostResponsePair {
                post: (0..lp).map(|k| 3 + (i + k) % 5).collect(),
                response: (0..lr - 1).map(|k| 3 + (i * k) % 5).chain([EOS]).collect(),
                gold_focus_slot: None,
                post_index: i,
            })
            .collect();
        let batches = make_batches(&pairs, bs, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.source.clone()).collect();
        prop_assert!(batches.iter().all(|b| b.rows <= bs));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
        for b in &batches {
            for (r, &src) in b.source.iter().enumerate() {
                prop_assert_eq!(b.post_row(r), pairs[src].post.as_slice());
                prop_assert_eq!(b.resp_row(r), pairs[src].response.as_slice());
                for c in 0..b.post_width {
                    let i = r * b.post_width + c;
                    prop_assert_eq!(b.post_mask[i], c < b.post_lengths[r]);
                    prop_assert_eq!(b.post_mask[i], b.post_ids[i] != PAD);
                }
                for c in 0..b.resp_width {
                    let i = r * b.resp_width + c;
                    prop_assert_eq!(b.resp_mask[i], c < b.resp_lengths[r]);
                }
            }
        }
        if let Some(s) = seed {
            prop_assert_eq!(&make_batches(&pairs, bs, Some(s)).unwrap(), &batches);
        }
    }

    #[test]
    fn strip_special_stops_at_eos(ids in prop::collection::vec(0usize..8, 0..15)) {
        let out = strip_special(&ids);
        let cut = ids.iter().position(|&t| t == EOS).unwrap_or(ids.len());
        let expected: Vec<usize> = ids[..cut].iter().copied().filter(|&t| t != PAD).collect();
        prop_assert_eq!(out, expected);
    }
}
