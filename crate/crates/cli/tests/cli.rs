use std::path::Path;
use std::process::{Command, Output};

fn fcvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcvae"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = fcvae(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"variant":"FocConstrain","d_h":8,"d_z":4,"d_attn":6,"d_bow":6,"batch_size":16,"total_steps":6,"warmup_steps":2,"kl_anneal_steps":3}"#;

fn corpus(dir: &Path) {
    ok(&[
        "make-corpus",
        "--n-pairs",
        "240",
        "--test-posts",
        "8",
        "--out",
        s(dir),
    ]);
}

#[test]
fn make_corpus_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    corpus(a.path());
    corpus(b.path());
    for f in ["train.jsonl", "test.jsonl", "vocab.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let test = std::fs::read_to_string(a.path().join("test.jsonl")).unwrap();
    assert_eq!(test.lines().count(), 8);
}

#[test]
fn train_generate_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let cfg = d.join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let run = d.join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&d.join("train.jsonl")),
        "--out",
        s(&run),
    ]);
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.exists());

    // resume appends to the same log
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&d.join("train.jsonl")),
        "--out",
        s(&run),
        "--checkpoint",
        s(&ckpt),
        "--steps",
        "8",
    ]);
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 9);
    assert!(log.lines().last().unwrap().starts_with("7,"));

    let gen = d.join("gen");
    ok(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--posts",
        s(&d.join("test.jsonl")),
        "--n-samples",
        "2",
        "--out",
        s(&gen),
    ]);
    let lines = std::fs::read_to_string(gen.join("generations.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 16);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first["focus"].is_array());
    assert!(gen.join("coverage/post0_sample1.csv").exists());

    let stdout = ok(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--posts",
        s(&d.join("test.jsonl")),
        "--n-samples",
        "2",
    ]);
    assert_eq!(String::from_utf8(stdout.stdout).unwrap(), lines);

    let ev = d.join("eval");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--test",
        s(&d.join("test.jsonl")),
        "--out",
        s(&ev),
    ]);
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed["n_posts"], 8);
    assert_eq!(printed["n_responses"], 24);
    assert!(printed["mean_alignment_gap"].is_number());
    assert!(ev.join("details.csv").exists());
    let again = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--test",
        s(&d.join("test.jsonl")),
        "--out",
        s(&ev),
    ]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let cfg = d.join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let a = d.join("a");
    let b = d.join("b");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "4",
        "--corpus",
        s(&d.join("train.jsonl")),
        "--out",
        s(&a),
    ]);
    ok(&[
        "train",
        "--config",
        s(&a.join("resolved_config.json")),
        "--out",
        s(&b),
    ]);
    for f in ["loss_log.csv", "checkpoint.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["config"]["init_seed"], 4);
    assert_eq!(resolved["config"]["shuffle_seed"], 5);
    assert_eq!(resolved["config"]["sample_seed"], 6);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(fcvae(&["eval", "--test", "x.jsonl"]).status.code(), Some(1));
    assert_eq!(fcvae(&["train"]).status.code(), Some(1));
    assert_eq!(fcvae(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(fcvae(&["--help"]).status.code(), Some(0));

    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"d_h": 7}"#).unwrap();
    corpus(d);
    let out = fcvae(&[
        "train",
        "--config",
        s(&bad),
        "--corpus",
        s(&d.join("train.jsonl")),
        "--out",
        s(d),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let junk = d.join("junk.bin");
    std::fs::write(&junk, b"FCVAECKP not really").unwrap();
    let out = fcvae(&[
        "eval",
        "--checkpoint",
        s(&junk),
        "--test",
        s(&d.join("test.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--variant", "FocConstrain", "--seed", "3"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}
