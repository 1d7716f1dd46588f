//! Objective assembly, schedules, Adam and the training loop.

pub mod checkpoint;
pub mod losses;
pub mod optim;
pub mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION};
pub use losses::{bow_logits, bow_loss, focus_loss, seq_loss, BowWeights, LossBreakdown};
pub use optim::{global_norm, Adam};
pub use schedule::{kl_anneal, lr_schedule};

use crate::autodiff::Tape;
use crate::corpus::{make_batches, Batch, PostResponsePair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{FocusCvae, TrainForward};
use crate::TrainConfig;

const SAMPLE_RNG: &str = "sample";

/// Reads the scalar loss terms off a finished forward pass.
pub fn breakdown(tape: &Tape, fwd: &TrainForward) -> LossBreakdown {
    let get = |v: Option<crate::autodiff::Var>| v.map_or(0.0, |v| tape.item(v));
    LossBreakdown {
        l_seq: tape.item(fwd.l_seq),
        l_foc: get(fwd.l_foc),
        l_kl: get(fwd.l_kl),
        l_bow: get(fwd.l_bow),
        gamma: fwd.gamma,
        total: tape.item(fwd.total),
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Number of updates applied before this step's forward pass.
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Model, optimizer and data order. Step `k` (0-based) trains on batch `k`
/// of the deterministic epoch sequence, with KL weight `kl_anneal(k)` and
/// learning rate `lr_schedule(k + 1)`.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: FocusCvae,
    pub adam: Adam,
    pub step: u64,
    sample_rng: ChaCha8Rng,
    pairs: Vec<PostResponsePair>,
    epoch: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(model: FocusCvae, pairs: Vec<PostResponsePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let c = &model.config;
        let adam = Adam::new(&model.params, c.adam_beta1, c.adam_beta2, c.adam_eps);
        let sample_rng = ChaCha8Rng::seed_from_u64(c.sample_seed);
        Ok(Self {
            model,
            adam,
            step: 0,
            sample_rng,
            pairs,
            epoch: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, pairs: Vec<PostResponsePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let sample_rng = ckpt
            .rng(SAMPLE_RNG)
            .ok_or_else(|| Error::Integrity("checkpoint lacks the sampling rng".into()))?;
        let model = FocusCvae::from_parts(ckpt.config, ckpt.vocab, ckpt.params)?;
        Ok(Self {
            model,
            adam: ckpt.adam,
            step: ckpt.step,
            sample_rng,
            pairs,
            epoch: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            step: self.step,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            rngs: vec![(SAMPLE_RNG.into(), RngState::capture(&self.sample_rng))],
        }
    }

    fn batch(&mut self, step: u64) -> Result<Batch> {
        let bs = self.model.config.batch_size;
        let per_epoch = self.pairs.len().div_ceil(bs) as u64;
        let epoch = step / per_epoch;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let seed = self.model.config.shuffle_seed.wrapping_add(epoch);
            self.epoch = Some((epoch, make_batches(&self.pairs, bs, Some(seed))?));
        }
        let batches = &self.epoch.as_ref().expect("epoch cached").1;
        Ok(batches[(step % per_epoch) as usize].clone())
    }

    /// Runs one forward/backward pass and Adam update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let c = self.model.config.clone();
        let gamma = kl_anneal(step, c.kl_anneal_steps)?;
        let lr = lr_schedule(step + 1, c.warmup_steps, c.peak_lr);
        let batch = self.batch(step)?;

        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let fwd = self
            .model
            .forward_train(&tape, &bound, &batch, gamma, &mut self.sample_rng)?;
        let loss = breakdown(&tape, &fwd);
        if let Some(term) = loss.non_finite_term() {
            return Err(Error::NonFiniteLoss { term, step });
        }
        let grads = tape.backward(fwd.total)?;
        self.model.params.collect_grads(&bound.vars, &grads);
        let grad_norm = self.adam.step(&mut self.model.params, lr, c.grad_clip)?;
        self.model.params.zero_grads();
        self.step += 1;
        Ok(StepRecord {
            step,
            loss,
            lr,
            grad_norm,
        })
    }
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// CSV loss log, header included.
    pub log: Option<PathBuf>,
    /// Checkpoint rewritten every `checkpoint_interval` steps and at the end.
    pub checkpoint: Option<PathBuf>,
}

/// Runs `trainer` until `config.total_steps` updates have been applied,
/// streaming the CSV log to `log`. On a non-finite loss the last written
/// checkpoint is left untouched and the error names the term.
pub fn run<W: Write>(
    trainer: &mut Trainer,
    log: &mut W,
    checkpoint_path: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    let total = trainer.model.config.total_steps;
    let interval = trainer.model.config.checkpoint_interval;
    let log_err = |e| Error::io("<loss log>", e);
    if trainer.step == 0 {
        writeln!(log, "{}", LossBreakdown::csv_header()).map_err(log_err)?;
    }
    let mut records = Vec::new();
    while trainer.step < total {
        let rec = trainer.train_step()?;
        writeln!(log, "{}", rec.loss.csv_row(rec.step, rec.lr)).map_err(log_err)?;
        records.push(rec);
        if let Some(path) = checkpoint_path {
            if interval > 0 && trainer.step.is_multiple_of(interval) {
                save_checkpoint(&trainer.checkpoint(), path)?;
            }
        }
    }
    log.flush().map_err(log_err)?;
    if let Some(path) = checkpoint_path {
        save_checkpoint(&trainer.checkpoint(), path)?;
    }
    Ok(records)
}

/// Builds a fresh model and trains it on `pairs`.
pub fn train(
    config: TrainConfig,
    vocab: Vocabulary,
    pairs: Vec<PostResponsePair>,
    outputs: &TrainOutputs,
) -> Result<(Trainer, Vec<StepRecord>)> {
    let model = FocusCvae::new(config, vocab)?;
    let mut trainer = Trainer::new(model, pairs)?;
    let records = match &outputs.log {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = std::io::BufWriter::new(file);
            run(&mut trainer, &mut w, outputs.checkpoint.as_deref())?
        }
        None => run(
            &mut trainer,
            &mut std::io::sink(),
            outputs.checkpoint.as_deref(),
        )?,
    };
    Ok((trainer, records))
}
