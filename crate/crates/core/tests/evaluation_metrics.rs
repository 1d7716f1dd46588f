use std::collections::{BTreeMap, BTreeSet};

use fcvae::corpus::{generate_synthetic, Dataset, PostEntry, SynthConfig};
use fcvae::evaluation::{dist_metrics, evaluate, multi_bleu, DistScope};
use fcvae::{Error, FocusCvae, TrainConfig, Variant};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Groups = Vec<Vec<Vec<u8>>>;

fn grams(s: &[u8], n: usize) -> Vec<Vec<u8>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn naive_dist(groups: &Groups, n: usize, intra: bool) -> f64 {
    let ratio = |rs: Vec<&Vec<u8>>| {
        let all: Vec<Vec<u8>> = rs.iter().flat_map(|r| grams(r, n)).collect();
        if all.is_empty() {
            return 0.0;
        }
        all.iter().collect::<BTreeSet<_>>().len() as f64 / all.len() as f64
    };
    if intra {
        if groups.is_empty() {
            return 0.0;
        }
        groups
            .iter()
            .map(|g| ratio(g.iter().collect()))
            .sum::<f64>()
            / groups.len() as f64
    } else {
        ratio(groups.iter().flatten().collect())
    }
}

fn naive_bleu(hyps: &Groups, refs: &Groups, n: usize) -> f64 {
    let mut m = vec![0.0; n];
    let mut t = vec![0.0; n];
    let (mut c, mut r) = (0.0, 0.0);
    for (hs, rs) in hyps.iter().zip(refs) {
        for h in hs {
            for k in 1..=n {
                let mut hc: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
                for g in grams(h, k) {
                    *hc.entry(g).or_default() += 1;
                }
                for (g, cnt) in hc {
                    let best = rs
                        .iter()
                        .map(|x| grams(x, k).iter().filter(|y| **y == g).count())
                        .max()
                        .unwrap();
                    m[k - 1] += cnt.min(best) as f64;
                    t[k - 1] += cnt as f64;
                }
            }
            c += h.len() as f64;
            let mut lens: Vec<usize> = rs.iter().map(Vec::len).collect();
            lens.sort_by_key(|&l| (l.abs_diff(h.len()), l));
            r += lens[0] as f64;
        }
    }
    if c == 0.0 || (0..n).any(|k| m[k] == 0.0) {
        return 0.0;
    }
    let p: f64 = (0..n).map(|k| (m[k] / t[k]).ln()).sum::<f64>() / n as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * p.exp()
}

fn random_groups(rng: &mut ChaCha8Rng, posts: usize, per: usize, alphabet: u8) -> Groups {
    (0..posts)
        .map(|_| {
            (0..per)
                .map(|_| {
                    let len = rng.random_range(0..7);
                    (0..len).map(|_| rng.random_range(0..alphabet)).collect()
                })
                .collect()
        })
        .collect()
}

#[test]
fn distinct_n_matches_a_naive_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let posts = rng.random_range(1..6);
        let per = rng.random_range(1..5);
        let g = random_groups(&mut rng, posts, per, 5);
        for n in 1..=3 {
            for (scope, intra) in [(DistScope::Intra, true), (DistScope::Inter, false)] {
                let got = dist_metrics(&g, n, scope).unwrap();
                assert!((got - naive_dist(&g, n, intra)).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&got));
            }
        }
    }
}

#[test]
fn bleu_matches_a_naive_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let posts = rng.random_range(1..6);
        let (hp, rp) = (rng.random_range(1..4), rng.random_range(1..4));
        let hyps = random_groups(&mut rng, posts, hp, 4);
        let mut refs = random_groups(&mut rng, posts, rp, 4);
        for rs in refs.iter_mut() {
            rs[0].push(0);
        }
        for n in 1..=2 {
            let got = multi_bleu(&hyps, &refs, n).unwrap();
            assert!((got - naive_bleu(&hyps, &refs, n)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
        }
    }
}

proptest! {
    #[test]
    fn bleu_ignores_post_order_reference_order_and_renaming(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyps = random_groups(&mut rng, 4, 2, 4);
        let refs = random_groups(&mut rng, 4, 3, 4);
        let base = [multi_bleu(&hyps, &refs, 1).unwrap(), multi_bleu(&hyps, &refs, 2).unwrap()];

        let mut order: Vec<usize> = (0..4).collect();
        order.shuffle(&mut rng);
        let h2: Groups = order.iter().map(|&i| hyps[i].clone()).collect();
        let mut r2: Groups = order.iter().map(|&i| refs[i].clone()).collect();
        for rs in r2.iter_mut() {
            rs.shuffle(&mut rng);
        }
        let rename = |g: &Groups| -> Groups {
            g.iter().map(|rs| rs.iter().map(|r| r.iter().map(|&t| 10 + (t + 1) % 4).collect()).collect()).collect()
        };
        let (h3, r3) = (rename(&h2), rename(&r2));
        for (n, b) in [(1, base[0]), (2, base[1])] {
            prop_assert!((multi_bleu(&h2, &r2, n).unwrap() - b).abs() < 1e-12);
            prop_assert!((multi_bleu(&h3, &r3, n).unwrap() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hypotheses_equal_to_a_reference_score_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut refs = random_groups(&mut rng, 3, 2, 6);
        for rs in refs.iter_mut() {
            for r in rs.iter_mut() {
                r.extend([1, 2]);
            }
        }
        let hyps: Groups = refs.iter().map(|rs| vec![rs[0].clone()]).collect();
        prop_assert!((multi_bleu(&hyps, &refs, 2).unwrap() - 1.0).abs() < 1e-12);
    }
}

fn small_model(variant: Variant) -> (FocusCvae, Dataset) {
    let (ds, vocab) = generate_synthetic(3, 90, &SynthConfig::default()).unwrap();
    let config = TrainConfig {
        variant,
        d_h: 8,
        d_z: 4,
        d_attn: 6,
        d_bow: 6,
        init_scale: 0.5,
        ..TrainConfig::default()
    };
    (FocusCvae::new(config, vocab).unwrap(), ds.split_tail(10).1)
}

#[test]
fn evaluation_is_deterministic_for_a_seed() {
    let (model, test) = small_model(Variant::FocConstrain);
    let a = evaluate(&model, &test, 3, 7).unwrap();
    let b = evaluate(&model, &test, 3, 7).unwrap();
    assert_eq!(a.report.to_canonical_json(), b.report.to_canonical_json());
    assert_eq!(a.details_csv(), b.details_csv());
    assert_eq!(a.report.n_posts, 10);
    assert_eq!(a.report.n_responses, 30);
}

#[test]
fn mean_alignment_gap_reaccumulates_from_details() {
    let (model, test) = small_model(Variant::FocCoverage);
    let ev = evaluate(&model, &test, 4, 1).unwrap();
    let mut gaps = Vec::new();
    for d in &ev.details {
        let steps: f64 = d.coverage_final.iter().sum::<f64>().round();
        let f = d.focus.as_ref().unwrap();
        let dist = d
            .coverage_final
            .iter()
            .zip(f)
            .map(|(c, f)| (c / steps - f).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((dist - d.alignment_gap.unwrap()).abs() < 1e-12);
        gaps.push(dist);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!((mean - ev.report.mean_alignment_gap.unwrap()).abs() < 1e-12);
}

#[test]
fn plain_variant_reports_a_null_gap() {
    let (model, test) = small_model(Variant::S2s);
    let ev = evaluate(&model, &test, 2, 1).unwrap();
    assert!(ev.report.mean_alignment_gap.is_none());
    assert!(ev
        .report
        .to_canonical_json()
        .contains("\"mean_alignment_gap\":null"));
}

#[test]
fn unknown_test_tokens_are_a_compatibility_error() {
    let (model, _) = small_model(Variant::Foc);
    let test = Dataset::new(vec![PostEntry {
        post: vec!["kw00".into(), "martian".into()],
        responses: vec![vec!["open0".into()]],
        gold_focus_slot: None,
    }]);
    assert!(matches!(
        evaluate(&model, &test, 1, 0),
        Err(Error::Compatibility(_))
    ));
}
