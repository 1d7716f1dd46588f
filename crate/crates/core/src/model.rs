//! The assembled response generator: parameter registry, the training
//! forward pass and prior-sampled generation.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GruWeights, ParamStore, Tape, Tensor, Var, GRU_PARAM_NAMES};
use crate::config::{TrainConfig, Variant};
use crate::corpus::{Batch, Vocabulary};
use crate::decoder::{
    decode_train, greedy_decode, initial_state, DecoderWeights, GenerationResult,
};
use crate::encoders::{
    encode, kl_divergence, prior, recognition, sample, EncoderOutputs, EncoderWeights,
    GaussianHead, GaussianVars, LatentSource,
};
use crate::error::{Error, Result};
use crate::focus::{
    augment_states, focus_generate, AttentionMemory, AttentionWeights, FocusWeights,
};
use crate::training::losses::{bow_logits, bow_loss, focus_loss, seq_loss, BowWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct FocusCvae {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

/// Every parameter recorded on one tape, grouped by role.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    pub encoder: EncoderWeights,
    pub recognition: Option<GaussianHead>,
    pub prior: Option<GaussianHead>,
    pub focus: Option<FocusWeights>,
    pub decoder: DecoderWeights,
    pub bow: Option<BowWeights>,
}

/// Tape handles produced by one training forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub total: Var,
    pub l_seq: Var,
    pub l_foc: Option<Var>,
    pub l_kl: Option<Var>,
    pub l_bow: Option<Var>,
    pub gamma: f64,
    pub focus: Option<Var>,
    pub alphas: Vec<Var>,
    pub coverage_trace: Vec<Var>,
    pub coverage: Var,
    pub logits: Vec<Var>,
    pub z: Option<Var>,
    pub posterior: Option<GaussianVars>,
    pub prior: Option<GaussianVars>,
}

fn shapes(config: &TrainConfig) -> Vec<(String, Vec<usize>)> {
    let v = config.vocab_size;
    let d_h = config.d_h;
    let half = d_h / 2;
    let d_z = config.d_z;
    let d_attn = config.d_attn;
    let variant = config.variant;
    let key_width = if variant.uses_latent() { d_h + 1 } else { d_h };
    let ctx_width = if variant.uses_latent() && config.context_uses_augmented {
        d_h + 1
    } else {
        d_h
    };

    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let gru = |prefix: &str, d_in: usize, hidden: usize, out: &mut Vec<(String, Vec<usize>)>| {
        for (i, name) in GRU_PARAM_NAMES.iter().enumerate() {
            let shape = match i {
                0..=2 => vec![d_in, hidden],
                3..=5 => vec![hidden, hidden],
                _ => vec![1, hidden],
            };
            out.push((format!("{prefix}.{name}"), shape));
        }
    };

    out.push(("embed.E".into(), vec![v, d_z]));
    for (layer, d_in) in [(0, d_z), (1, d_h)] {
        for dir in ["fwd", "bwd"] {
            gru(&format!("encoder.l{layer}.{dir}"), d_in, half, &mut out);
        }
    }
    if variant.uses_latent() {
        out.push(("recognition.W_q".into(), vec![2 * d_h, 2 * d_z]));
        out.push(("recognition.b_q".into(), vec![1, 2 * d_z]));
        out.push(("prior.W_p".into(), vec![d_h, 2 * d_z]));
        out.push(("prior.b_p".into(), vec![1, 2 * d_z]));
        out.push(("focus.W_f".into(), vec![d_h, d_attn]));
        out.push(("focus.U_f".into(), vec![d_z, d_attn]));
        out.push(("focus.v_f".into(), vec![d_attn, 1]));
    }
    out.push(("attention.W_a".into(), vec![key_width, d_attn]));
    out.push(("attention.U_a".into(), vec![d_h, d_attn]));
    if variant.uses_coverage_attention() {
        out.push(("attention.V_a".into(), vec![d_h + 1, d_attn]));
    }
    out.push(("attention.v_a".into(), vec![d_attn, 1]));
    out.push(("decoder.start".into(), vec![1, d_z]));
    out.push(("decoder.init.W_x".into(), vec![d_h, 2 * d_h]));
    if variant.uses_latent() && config.z_to_decoder_init {
        out.push(("decoder.init.W_z".into(), vec![d_z, 2 * d_h]));
    }
    out.push(("decoder.init.b".into(), vec![1, 2 * d_h]));
    gru("decoder.l0", d_z + ctx_width, d_h, &mut out);
    gru("decoder.l1", d_h, d_h, &mut out);
    out.push(("output.W_d".into(), vec![d_h + ctx_width, v]));
    out.push(("output.d_d".into(), vec![1, v]));
    if variant.uses_latent() {
        out.push(("bow.W_1".into(), vec![d_z + d_h, config.d_bow]));
        out.push(("bow.b_1".into(), vec![1, config.d_bow]));
        out.push(("bow.W_2".into(), vec![config.d_bow, v]));
        out.push(("bow.b_2".into(), vec![1, v]));
    }
    out
}

impl FocusCvae {
    /// Fresh model with parameters drawn uniformly from `[-init_scale, init_scale]`.
    pub fn new(mut config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let dist = Uniform::new_inclusive(-config.init_scale, config.init_scale)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, shape) in shapes(&config) {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            params.add(&name, Tensor::new(&shape, data)?)?;
        }
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_parts(config: TrainConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Compatibility(format!(
                "config vocab_size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let expected = shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Compatibility(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Compatibility(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Compatibility(format!("missing parameter {name}"))),
            }
        }
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        self.bind_vars(self.params.bind(tape))
    }

    /// Groups tape handles given in parameter registration order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.params.len(), "one handle per parameter");
        let p = |name: &str| -> Var {
            vars[self
                .params
                .id(name)
                .unwrap_or_else(|| panic!("parameter {name} registered"))]
        };
        let maybe = |name: &str| self.params.id(name).map(|i| vars[i]);
        let gru = |prefix: &str| {
            let v: Vec<Var> = GRU_PARAM_NAMES
                .iter()
                .map(|n| p(&format!("{prefix}.{n}")))
                .collect();
            GruWeights::from_slice(&v)
        };
        let c = &self.config;
        let head = |w: &str, b: &str| GaussianHead {
            weight: p(w),
            bias: p(b),
            log_var_min: c.log_var_min,
            log_var_max: c.log_var_max,
        };
        let latent = c.variant.uses_latent();
        let embedding = p("embed.E");
        Bound {
            encoder: EncoderWeights {
                embedding,
                layers: [
                    [gru("encoder.l0.fwd"), gru("encoder.l0.bwd")],
                    [gru("encoder.l1.fwd"), gru("encoder.l1.bwd")],
                ],
            },
            recognition: latent.then(|| head("recognition.W_q", "recognition.b_q")),
            prior: latent.then(|| head("prior.W_p", "prior.b_p")),
            focus: latent.then(|| FocusWeights {
                w_f: p("focus.W_f"),
                u_f: p("focus.U_f"),
                v_f: p("focus.v_f"),
            }),
            decoder: DecoderWeights {
                embedding,
                start: p("decoder.start"),
                init_x: p("decoder.init.W_x"),
                init_z: maybe("decoder.init.W_z"),
                init_b: p("decoder.init.b"),
                layers: [gru("decoder.l0"), gru("decoder.l1")],
                out_w: p("output.W_d"),
                out_b: p("output.d_d"),
                attn: AttentionWeights {
                    w_a: p("attention.W_a"),
                    u_a: p("attention.U_a"),
                    v_a: maybe("attention.V_a"),
                    v_a_out: p("attention.v_a"),
                },
            },
            bow: latent.then(|| BowWeights {
                w1: p("bow.W_1"),
                b1: p("bow.b_1"),
                w2: p("bow.W_2"),
                b2: p("bow.b_2"),
            }),
            vars,
        }
    }

    pub fn encode_posts(
        &self,
        tape: &Tape,
        bound: &Bound,
        batch: &Batch,
    ) -> Result<EncoderOutputs> {
        encode(
            tape,
            &bound.encoder,
            &batch.post_ids,
            &batch.post_mask,
            batch.rows,
            batch.post_width,
        )
    }

    /// Attention memory for a batch given the post encoding and, for the
    /// focus variants, the focus distribution.
    fn memory<'b>(
        &self,
        tape: &Tape,
        bound: &Bound,
        enc: &EncoderOutputs,
        focus: Option<Var>,
        batch: &'b Batch,
    ) -> Result<AttentionMemory<'b>> {
        let (keys_input, context_rows) = match focus {
            Some(f) => {
                let augmented = augment_states(tape, enc.states, f)?;
                let ctx = if self.config.context_uses_augmented {
                    augmented
                } else {
                    enc.states
                };
                (augmented, ctx)
            }
            None => (enc.states, enc.states),
        };
        AttentionMemory::new(
            tape,
            keys_input,
            context_rows,
            &batch.post_mask,
            batch.rows,
            batch.post_width,
            &bound.decoder.attn,
        )
    }

    /// Teacher-forced forward pass and the total objective at KL weight `gamma`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        bound: &Bound,
        batch: &Batch,
        gamma: f64,
        rng: &mut R,
    ) -> Result<TrainForward> {
        if !batch.has_responses() {
            return Err(Error::Phase("training needs gold responses"));
        }
        let c = &self.config;
        let enc_x = self.encode_posts(tape, bound, batch)?;

        if !c.variant.uses_latent() {
            let init = initial_state(tape, &bound.decoder, enc_x.summary, None)?;
            let memory = self.memory(tape, bound, &enc_x, None, batch)?;
            let dec = decode_train(tape, &bound.decoder, &memory, batch, init, c.variant)?;
            let l_seq = tape.scale(seq_loss(tape, &dec.logits, batch)?, c.seq_weight);
            return Ok(TrainForward {
                total: l_seq,
                l_seq,
                l_foc: None,
                l_kl: None,
                l_bow: None,
                gamma,
                focus: None,
                alphas: dec.alphas,
                coverage_trace: dec.coverage_trace,
                coverage: dec.coverage.d,
                logits: dec.logits,
                z: None,
                posterior: None,
                prior: None,
            });
        }

        let enc_y = encode(
            tape,
            &bound.encoder,
            &batch.resp_ids,
            &batch.resp_mask,
            batch.rows,
            batch.resp_width,
        )?;
        let q = recognition(
            tape,
            enc_x.summary,
            Some(enc_y.summary),
            bound.recognition.as_ref().expect("latent variant"),
        )?;
        let p = prior(
            tape,
            enc_x.summary,
            bound.prior.as_ref().expect("latent variant"),
        )?;
        let l_kl = tape.mean(kl_divergence(tape, &q, &p)?);

        let focus_w = bound.focus.expect("latent variant");
        let bow_w = bound.bow.expect("latent variant");
        let inv_samples = 1.0 / c.latent_samples as f64;
        let mut seq_terms = Vec::new();
        let mut foc_terms = Vec::new();
        let mut bow_terms = Vec::new();
        let mut last = None;
        for _ in 0..c.latent_samples {
            let (z, _) = sample(tape, &q, rng)?;
            let focus = focus_generate(
                tape,
                enc_x.states,
                &batch.post_mask,
                batch.rows,
                batch.post_width,
                z,
                &focus_w,
            )?;
            let init = initial_state(tape, &bound.decoder, enc_x.summary, Some(z))?;
            let memory = self.memory(tape, bound, &enc_x, Some(focus), batch)?;
            let dec = decode_train(tape, &bound.decoder, &memory, batch, init, c.variant)?;
            seq_terms.push(seq_loss(tape, &dec.logits, batch)?);
            if c.variant.uses_focus_constraint() {
                foc_terms.push(focus_loss(
                    tape,
                    dec.coverage.d,
                    &batch.resp_lengths,
                    focus,
                )?);
            }
            let bow = bow_logits(tape, z, enc_x.summary, &bow_w)?;
            bow_terms.push(bow_loss(tape, bow, batch)?);
            last = Some((z, focus, dec));
        }
        let average = |terms: &[Var], weight: f64| -> Result<Option<Var>> {
            let mut acc: Option<Var> = None;
            for &t in terms {
                acc = Some(match acc {
                    Some(a) => tape.add(a, t)?,
                    None => t,
                });
            }
            Ok(acc.map(|a| tape.scale(a, inv_samples * weight)))
        };
        let l_seq = average(&seq_terms, c.seq_weight)?.expect("at least one sample");
        let l_foc = average(&foc_terms, c.foc_weight)?;
        let l_bow = average(&bow_terms, c.bow_weight)?;

        let mut total = tape.add(l_seq, tape.scale(l_kl, gamma))?;
        if let Some(f) = l_foc {
            total = tape.add(total, f)?;
        }
        if let Some(b) = l_bow {
            total = tape.add(total, b)?;
        }
        let (z, focus, dec) = last.expect("at least one sample");
        Ok(TrainForward {
            total,
            l_seq,
            l_foc,
            l_kl: Some(l_kl),
            l_bow,
            gamma,
            focus: Some(focus),
            alphas: dec.alphas,
            coverage_trace: dec.coverage_trace,
            coverage: dec.coverage.d,
            logits: dec.logits,
            z: Some(z),
            posterior: Some(q),
            prior: Some(p),
        })
    }

    /// Generates `n_samples` responses per post, each from its own prior draw.
    /// Output order is post-major: all samples of post 0, then post 1, ...
    pub fn generate<R: Rng + ?Sized>(
        &self,
        posts: &[Vec<usize>],
        n_samples: usize,
        rng: &mut R,
        max_len: usize,
    ) -> Result<Vec<GenerationResult>> {
        if posts.iter().any(Vec::is_empty) {
            return Err(Error::Validation(
                "cannot generate for an empty post".into(),
            ));
        }
        if n_samples == 0 || posts.is_empty() {
            return Ok(Vec::new());
        }
        if max_len == 0 {
            return Err(Error::Validation("max_len must be positive".into()));
        }
        let rows: Vec<&[usize]> = posts
            .iter()
            .flat_map(|p| std::iter::repeat_n(p.as_slice(), n_samples))
            .collect();
        let batch = Batch::from_posts(&rows)?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let enc = self.encode_posts(&tape, &bound, &batch)?;

        let (focus, z) = if self.config.variant.uses_latent() {
            let p = prior(
                &tape,
                enc.summary,
                bound.prior.as_ref().expect("latent variant"),
            )?;
            let (z, _) = sample(&tape, &p, rng)?;
            let f = focus_generate(
                &tape,
                enc.states,
                &batch.post_mask,
                batch.rows,
                batch.post_width,
                z,
                bound.focus.as_ref().expect("latent variant"),
            )?;
            (Some(f), Some(z))
        } else {
            (None, None)
        };
        let init = initial_state(&tape, &bound.decoder, enc.summary, z)?;
        let memory = self.memory(&tape, &bound, &enc, focus, &batch)?;
        let (tokens, coverage) = greedy_decode(
            &tape,
            &bound.decoder,
            &memory,
            init,
            max_len,
            self.config.variant,
        )?;

        let width = batch.post_width;
        let focus_vals = focus.map(|f| tape.to_vec(f));
        Ok(tokens
            .into_iter()
            .enumerate()
            .map(|(r, token_ids)| {
                let len = batch.post_lengths[r];
                GenerationResult {
                    token_ids,
                    focus: focus_vals
                        .as_ref()
                        .map(|f| f[r * width..r * width + len].to_vec()),
                    coverage_final: coverage[r * width..r * width + len].to_vec(),
                    z_source: z.map(|_| LatentSource::Prior),
                }
            })
            .collect())
    }
}
