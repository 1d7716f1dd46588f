use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use fcvae::autodiff::GradCheckConfig;
use fcvae::corpus::{generate_synthetic, Dataset, SynthConfig, Vocabulary};
use fcvae::evaluation::evaluate;
use fcvae::focus::coverage_report;
use fcvae::micro::micro_gradcheck;
use fcvae::training::{self, load_checkpoint, Trainer};
use fcvae::{FocusCvae, TrainConfig, Variant};

const RESOLVED: &str = "resolved_config.json";

#[derive(Parser)]
#[command(
    name = "fcvae",
    version,
    about = "Focus-constrained CVAE response generator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config: a bare training config or a resolved config from an earlier run
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "n-samples")]
    n_samples: Option<usize>,
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    /// Initialize weights uniformly in [-1, 1]
    #[arg(long = "paper-init")]
    paper_init: bool,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with known focus slots
    MakeCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long = "n-pairs")]
        n_pairs: Option<usize>,
        /// Posts held out into test.jsonl
        #[arg(long = "test-posts")]
        test_posts: Option<usize>,
    },
    /// Train a model, writing a loss log and checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Defaults to vocab.json next to the corpus
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Sample responses for every post in a JSONL file
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        posts: Option<PathBuf>,
    },
    /// Score prior samples against a test corpus
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Finite-difference check of the micro model's gradients
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Everything a subcommand needs; persisted as the resolved config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunFile {
    command: Option<String>,
    config: TrainConfig,
    seed: Option<u64>,
    corpus: Option<PathBuf>,
    vocab: Option<PathBuf>,
    posts: Option<PathBuf>,
    test: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    n_samples: Option<usize>,
    max_len: Option<usize>,
    n_pairs: Option<usize>,
    test_posts: Option<usize>,
}

/// Bad invocation rather than a runtime failure.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn read_config(path: &Path) -> Result<RunFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let parsed = if value.get("config").is_some() {
        serde_json::from_value::<RunFile>(value)
    } else {
        serde_json::from_value::<TrainConfig>(value).map(|config| RunFile {
            config,
            ..RunFile::default()
        })
    };
    parsed.map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn resolve(command: &str, common: &Common) -> Result<RunFile> {
    let mut run = match &common.config {
        Some(p) => read_config(p)?,
        None => RunFile::default(),
    };
    run.command = Some(command.to_string());
    if common.seed.is_some() {
        run.seed = common.seed;
    }
    if let Some(v) = common.variant {
        run.config.variant = v;
    }
    macro_rules! take {
        ($($f:ident),*) => { $(if common.$f.is_some() { run.$f = common.$f.clone(); })* };
    }
    take!(checkpoint, out, n_samples, max_len);
    if let Some(s) = common.steps {
        run.config.total_steps = s;
    }
    if common.paper_init {
        run.config.init_scale = 1.0;
    }
    Ok(run)
}

fn require<'a, T>(v: &'a Option<T>, flag: &str, command: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| usage(format!("{command} requires --{flag}")))
}

fn out_dir(run: &RunFile) -> Result<PathBuf> {
    let dir = run.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn persist(run: &RunFile, dir: &Path) -> Result<()> {
    let value = serde_json::to_value(run)?;
    let path = dir.join(RESOLVED);
    fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn make_corpus(mut run: RunFile) -> Result<()> {
    let n_pairs = *run.n_pairs.get_or_insert(20_000);
    let test_posts = *run.test_posts.get_or_insert(500);
    let seed = *run.seed.get_or_insert(7);
    let synth = SynthConfig {
        vocab_size: run.config.vocab_size,
        ..SynthConfig::default()
    };
    let (data, vocab) = generate_synthetic(seed, n_pairs, &synth)?;
    let (train, test) = data.split_tail(test_posts);
    let dir = out_dir(&run)?;
    train.save_jsonl(dir.join("train.jsonl"))?;
    test.save_jsonl(dir.join("test.jsonl"))?;
    fs::write(
        dir.join("vocab.json"),
        serde_json::to_string(&vocab)? + "\n",
    )?;
    persist(&run, &dir)?;
    println!(
        "wrote {} train posts and {} test posts to {}",
        train.n_posts(),
        test.n_posts(),
        dir.display()
    );
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn train(mut run: RunFile) -> Result<()> {
    let corpus = require(&run.corpus, "corpus", "train")?.clone();
    let vocab_path = run
        .vocab
        .get_or_insert_with(|| corpus.with_file_name("vocab.json"))
        .clone();
    if let Some(seed) = run.seed {
        run.config.init_seed = seed;
        run.config.shuffle_seed = seed.wrapping_add(1);
        run.config.sample_seed = seed.wrapping_add(2);
    }
    let data = Dataset::load_jsonl(&corpus)?;
    let vocab = load_vocab(&vocab_path)?;
    let pairs = data.encode(&vocab);
    let dir = out_dir(&run)?;
    let ckpt_path = dir.join("checkpoint.bin");
    let log_path = dir.join("loss_log.csv");

    let mut trainer = match &run.checkpoint {
        Some(resume) => {
            let ckpt = load_checkpoint(resume)?;
            let total_steps = run.config.total_steps;
            run.config = TrainConfig {
                total_steps,
                ..ckpt.config.clone()
            };
            let mut t = Trainer::from_checkpoint(ckpt, pairs)?;
            t.model.config.total_steps = total_steps;
            t
        }
        None => Trainer::new(FocusCvae::new(run.config.clone(), vocab)?, pairs)?,
    };
    run.config.vocab_size = trainer.model.config.vocab_size;
    persist(&run, &dir)?;
    let file = if trainer.step == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().append(true).create(true).open(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let records = training::run(&mut trainer, &mut log, Some(&ckpt_path))?;
    if let Some(last) = records.last() {
        println!(
            "trained to step {} (last total loss {:.6}); checkpoint {}",
            trainer.step,
            last.loss.total,
            ckpt_path.display()
        );
    }
    Ok(())
}

fn read_posts(path: &Path, vocab: &Vocabulary) -> Result<Vec<(Vec<String>, Vec<usize>)>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut posts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let tokens: Vec<String> = value
            .get("post")
            .and_then(|p| serde_json::from_value(p.clone()).ok())
            .ok_or_else(|| {
                usage(format!(
                    "{} line {}: missing \"post\" list",
                    path.display(),
                    i + 1
                ))
            })?;
        if tokens.is_empty() {
            bail!(usage(format!(
                "{} line {}: empty post",
                path.display(),
                i + 1
            )));
        }
        let ids = vocab.encode(&tokens);
        posts.push((tokens, ids));
    }
    Ok(posts)
}

fn load_model(run: &RunFile, command: &str) -> Result<FocusCvae> {
    let path = require(&run.checkpoint, "checkpoint", command)?;
    let ckpt = load_checkpoint(path)?;
    Ok(FocusCvae::from_parts(ckpt.config, ckpt.vocab, ckpt.params)?)
}

#[derive(Serialize)]
struct GeneratedLine<'a> {
    post_id: usize,
    sample_id: usize,
    tokens: Vec<String>,
    token_ids: &'a [usize],
    focus: &'a Option<Vec<f64>>,
    coverage_final: &'a [f64],
    alignment_gap: Option<f64>,
}

fn generate(mut run: RunFile) -> Result<()> {
    let posts_path = require(&run.posts, "posts", "generate")?.clone();
    let model = load_model(&run, "generate")?;
    run.config = model.config.clone();
    let n_samples = *run.n_samples.get_or_insert(3);
    let max_len = *run.max_len.get_or_insert(model.config.max_decode_len());
    let seed = *run.seed.get_or_insert(0);
    let posts = read_posts(&posts_path, &model.vocab)?;
    let ids: Vec<Vec<usize>> = posts.iter().map(|(_, ids)| ids.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let results = model.generate(&ids, n_samples, &mut rng, max_len)?;

    let mut out: Box<dyn Write> = match &run.out {
        Some(_) => {
            let dir = out_dir(&run)?;
            persist(&run, &dir)?;
            Box::new(BufWriter::new(File::create(dir.join("generations.jsonl"))?))
        }
        None => Box::new(std::io::stdout().lock()),
    };
    for (k, g) in results.iter().enumerate() {
        let (post_id, sample_id) = (k / n_samples, k % n_samples);
        let report = match &g.focus {
            Some(f) => Some(coverage_report(&g.coverage_final, g.steps(), f)?),
            None => None,
        };
        if let (Some(r), Some(_)) = (&report, &run.out) {
            let dir = out_dir(&run)?.join("coverage");
            fs::create_dir_all(&dir)?;
            let name = format!("post{post_id}_sample{sample_id}.csv");
            fs::write(dir.join(name), r.to_csv(&posts[post_id].0))?;
        }
        let line = GeneratedLine {
            post_id,
            sample_id,
            tokens: model
                .vocab
                .decode(&fcvae::corpus::strip_special(&g.token_ids)),
            token_ids: &g.token_ids,
            focus: &g.focus,
            coverage_final: &g.coverage_final,
            alignment_gap: report.map(|r| r.distance),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    Ok(())
}

fn eval(mut run: RunFile) -> Result<()> {
    let test_path = require(&run.test, "test", "eval")?.clone();
    let model = load_model(&run, "eval")?;
    run.config = model.config.clone();
    let n_samples = *run.n_samples.get_or_insert(3);
    let seed = *run.seed.get_or_insert(0);
    let test = Dataset::load_jsonl(&test_path)?;
    let result = evaluate(&model, &test, n_samples, seed)?;
    let dir = out_dir(&run)?;
    persist(&run, &dir)?;
    let json = result.report.to_canonical_json();
    fs::write(dir.join("report.json"), format!("{json}\n"))?;
    fs::write(dir.join("details.csv"), result.details_csv())?;
    println!("{json}");
    Ok(())
}

fn gradcheck(mut run: RunFile) -> Result<()> {
    let seed = *run.seed.get_or_insert(0);
    let report = micro_gradcheck(run.config.variant, seed, GradCheckConfig::default())?;
    let json = serde_json::to_string_pretty(&report)?;
    if run.out.is_some() {
        let dir = out_dir(&run)?;
        persist(&run, &dir)?;
        fs::write(dir.join("gradcheck.json"), format!("{json}\n"))?;
    }
    println!("{json}");
    if !report.passed {
        let worst = report
            .tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| format!("{} ({:.3e})", t.name, t.max_rel_error))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(anyhow!("gradient check failed for {worst}"));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeCorpus {
            common,
            n_pairs,
            test_posts,
        } => {
            let mut run = resolve("make-corpus", &common)?;
            if n_pairs.is_some() {
                run.n_pairs = n_pairs;
            }
            if test_posts.is_some() {
                run.test_posts = test_posts;
            }
            make_corpus(run)
        }
        Command::Train {
            common,
            corpus,
            vocab,
        } => {
            let mut run = resolve("train", &common)?;
            if corpus.is_some() {
                run.corpus = corpus;
            }
            if vocab.is_some() {
                run.vocab = vocab;
            }
            train(run)
        }
        Command::Generate { common, posts } => {
            let mut run = resolve("generate", &common)?;
            if posts.is_some() {
                run.posts = posts;
            }
            generate(run)
        }
        Command::Eval { common, test } => {
            let mut run = resolve("eval", &common)?;
            if test.is_some() {
                run.test = test;
            }
            eval(run)
        }
        Command::Gradcheck { common } => gradcheck(resolve("gradcheck", &common)?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<fcvae::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
