//! The recurrent captioner: encoder → STL → filter → decoder, fed back for
//! `T` loop iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::decoder::{soft_context, Accumulator, Decoder, DecoderConfig, DecoderState};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::filter::{AttentionFilter, FilterConfig, FilterMode, FilterOut};
use crate::losses::{combined, discriminative, variational_objective, VaeConfig, VariationalBranch, VariationalTerms};
use crate::nn::Linear;
use crate::params::{fnv1a, Binder, ParamStore};
use crate::stl::{channel_mean, SpatialTransformer, StlConfig};
use crate::tensor::Tensor;
use crate::text::{TextEncoder, BOS, EOS, PAD, RESERVED};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub stl: StlConfig,
    pub filter: FilterConfig,
    pub text_dim: usize,
    pub decoder: DecoderConfig,
    pub vae: VaeConfig,
    /// Loop iterations `T`.
    pub loops: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            stl: StlConfig::default(),
            filter: FilterConfig::default(),
            text_dim: 64,
            decoder: DecoderConfig::default(),
            vae: VaeConfig::default(),
            loops: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    /// `L_s + λ·L_d`.
    #[default]
    Attention,
    /// `L_s − β·(recon − KL)`.
    Variational,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Expected context; exact likelihood of the soft model.
    #[default]
    Soft,
    /// Hard one-hot draws with a score-function gradient and baseline.
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub kind: LossKind,
    pub lambda: f64,
    pub beta: f64,
    pub estimator: Estimator,
    pub mc_samples: usize,
}

impl Default for Objective {
    fn default() -> Self {
        Self { kind: LossKind::Attention, lambda: 0.1, beta: 0.1, estimator: Estimator::Soft, mc_samples: 4 }
    }
}

/// Per-item randomness, independent of parameter init and shuffling.
pub struct Noise {
    pub eps: Vec<Tensor>,
    pub rng: ChaCha8Rng,
}

impl Noise {
    pub fn new(seed: u64, loops: usize, latent: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = (0..loops)
            .map(|_| Tensor::vector((0..latent).map(|_| rng.sample(StandardNormal)).collect()))
            .collect();
        Self { eps, rng }
    }

    /// Stream for `item` in `epoch` of a run seeded with `seed`.
    pub fn for_item(seed: u64, epoch: usize, item: usize, loops: usize, latent: usize) -> Self {
        let key = format!("noise/{seed}/{epoch}/{item}");
        Self::new(fnv1a(key.as_bytes()), loops, latent)
    }
}

/// Everything one loop iteration produced.
#[derive(Clone, Debug)]
pub struct LoopState<'t> {
    pub theta: Var<'t>,
    pub warped: Var<'t>,
    pub filter: FilterOut<'t>,
    /// Decoder hidden state fed back to the next iteration.
    pub h: Var<'t>,
    pub alphas: Vec<Var<'t>>,
    /// Natural-log probability of each emitted or gold token.
    pub token_log_probs: Vec<f64>,
}

/// Loss and its pieces for one item.
pub struct ForwardOut<'t> {
    pub loss: Var<'t>,
    pub ls: Var<'t>,
    pub ld: Option<Var<'t>>,
    pub variational: Option<VariationalTerms<'t>>,
    /// Sequence NLL of every hard draw (for the baseline update).
    pub sample_nll: Vec<f64>,
    pub trace: Vec<LoopState<'t>>,
}

pub struct Inference<'t> {
    pub tokens: Vec<usize>,
    pub trace: Vec<LoopState<'t>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: usize,
    pub encoder: Encoder,
    pub stl: SpatialTransformer,
    pub filter: AttentionFilter,
    pub text: TextEncoder,
    pub decoder: Decoder,
    pub word_head: Linear,
    pub vae: VariationalBranch,
}

struct SeqOut<'t> {
    nll: Var<'t>,
    log_alpha: Var<'t>,
    h: Var<'t>,
    alphas: Vec<Var<'t>>,
    token_log_probs: Vec<f64>,
}

struct Hyp<'t> {
    tokens: Vec<usize>,
    score: f64,
    dec: DecoderState<'t>,
    text: (Var<'t>, Var<'t>),
    alphas: Vec<Var<'t>>,
    log_probs: Vec<f64>,
}

/// Inputs shared by every decoder pass of one loop.
struct LoopView<'t> {
    ann: Var<'t>,
    summary: Var<'t>,
}

impl Model {
    /// Registers every parameter, including the variational branch, so a
    /// seed fixes the initial weights regardless of the loss in use.
    pub fn new(store: &mut ParamStore, config: ModelConfig, vocab: usize) -> Result<Self> {
        if config.loops == 0 {
            return Err(Error::Config("loop.steps must be at least 1".into()));
        }
        if vocab <= RESERVED.len() {
            return Err(Error::Config("vocabulary has no words".into()));
        }
        let encoder = Encoder::new(store, config.encoder.clone())?;
        let cube = config.encoder.cube_shape();
        let hidden = config.decoder.hidden;
        let filter = AttentionFilter::new(store, config.filter.clone(), cube, hidden)?;
        let (vh, vw, vc) = filter.output_shape();
        let stl = SpatialTransformer::new(store, config.stl.clone(), cube, hidden, vc)?;
        let text = TextEncoder::new(store, vocab, config.text_dim)?;
        let decoder = Decoder::new(store, config.decoder.clone(), vc, cube.2, config.text_dim, vocab)?;
        let word_head = Linear::new(store, "loss.word_head", vc, vocab)?;
        let pixels = config.encoder.height * config.encoder.width * 3;
        let vae = VariationalBranch::new(store, config.vae.clone(), vh * vw * vc, 2 * config.text_dim, pixels)?;
        Ok(Self { config, vocab, encoder, stl, filter, text, decoder, word_head, vae })
    }

    pub fn build(seed: u64, config: ModelConfig, vocab: usize) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new(seed);
        let model = Self::new(&mut store, config, vocab)?;
        Ok((store, model))
    }

    /// Runs loop iteration `t` up to the decoder input; returns the state
    /// pieces and the decoder's view.
    fn loop_front<'t>(
        &self,
        b: &Binder<'t, '_>,
        cube: Var<'t>,
        v_summary: Var<'t>,
        gru: Var<'t>,
        h_fb: Var<'t>,
        vhat_summary: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>, FilterOut<'t>, LoopView<'t>)> {
        let th = self.stl.compute_theta(b, gru, v_summary, h_fb, vhat_summary)?;
        let u = self.stl.warp(b, cube, &th)?;
        let f = self.filter.apply(b, h_fb, u)?;
        let s = f.vhat.shape();
        let ann = f.vhat.reshape(&[s[0] * s[1], s[2]])?;
        let summary = channel_mean(u)?;
        Ok((th.theta, th.state, u, f, LoopView { ann, summary }))
    }

    /// `K` decoder steps for one word, returning the new state, the word
    /// log-probabilities and the attention weights.
    fn word_step<'t>(
        &self,
        b: &Binder<'t, '_>,
        view: &LoopView<'t>,
        state: DecoderState<'t>,
        w_pre: Var<'t>,
        hard: Option<&mut ChaCha8Rng>,
    ) -> Result<(DecoderState<'t>, Var<'t>, Var<'t>, Option<Var<'t>>)> {
        let scores = self.decoder.scores(b, view.ann, view.summary, w_pre)?;
        let alpha = scores.softmax()?;
        let (zhat, log_alpha) = match hard {
            Some(rng) => {
                let idx = draw(&alpha.value(), rng);
                (view.ann.row(idx)?, Some(scores.log_softmax()?.select(idx)?))
            }
            None => (soft_context(view.ann, alpha)?, None),
        };
        let mut acc = Accumulator::new(self.config.decoder.k);
        let mut state = state;
        loop {
            let (next, logits) = self.decoder.step(b, state, w_pre, zhat)?;
            state = next;
            if let Some(total) = acc.push(logits)? {
                return Ok((state, total.log_softmax()?, alpha, log_alpha));
            }
        }
    }

    fn teacher_forced<'t>(
        &self,
        b: &Binder<'t, '_>,
        view: &LoopView<'t>,
        prefix: &[Var<'t>],
        targets: &[usize],
        mut hard: Option<&mut ChaCha8Rng>,
    ) -> Result<SeqOut<'t>> {
        let tape = b.tape();
        let mut state = self.decoder.init_state(b, view.ann)?;
        let mut nll = tape.scalar(0.0);
        let mut log_alpha = tape.scalar(0.0);
        let mut alphas = Vec::with_capacity(targets.len());
        let mut token_log_probs = Vec::with_capacity(targets.len());
        for (&w_pre, &target) in prefix.iter().zip(targets) {
            let (next, logp, alpha, la) = self.word_step(b, view, state, w_pre, hard.as_deref_mut())?;
            state = next;
            let lp = logp.select(target)?;
            token_log_probs.push(lp.item());
            nll = nll.sub(lp)?;
            if let Some(la) = la {
                log_alpha = log_alpha.add(la)?;
            }
            alphas.push(alpha);
        }
        Ok(SeqOut { nll, log_alpha, h: state.h, alphas, token_log_probs })
    }

    fn check_caption(&self, caption: &[usize]) -> Result<()> {
        if caption.is_empty() {
            return Err(Error::Input("empty caption".into()));
        }
        if let Some(&bad) = caption.iter().find(|&&t| t >= self.vocab || t == BOS || t == EOS || t == PAD) {
            return Err(Error::Input(format!("caption token {bad} is not a word id")));
        }
        Ok(())
    }

    /// Training forward pass for one `(image, caption)` pair. `caption`
    /// holds word ids without BOS/EOS. `baseline` is the running mean NLL
    /// used by the Monte-Carlo estimator.
    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        image: &Tensor,
        caption: &[usize],
        objective: &Objective,
        noise: &mut Noise,
        baseline: f64,
    ) -> Result<ForwardOut<'t>> {
        self.check_caption(caption)?;
        let tape = b.tape();
        let (cube, _) = self.encoder.encode(b, tape.constant(image.clone()))?;
        let v_summary = channel_mean(cube)?;

        // Forward reader states over [BOS, w_1..w_n]: state k-1 precedes target k.
        let mut reader = self.text.zero_state(b);
        let mut prefix = Vec::with_capacity(caption.len() + 1);
        for &t in std::iter::once(&BOS).chain(caption) {
            reader = self.text.forward_step(b, t, reader)?;
            prefix.push(reader.0);
        }
        let mut targets = caption.to_vec();
        targets.push(EOS);

        let hidden = self.config.decoder.hidden;
        let vc = self.filter.output_shape().2;
        let mut h_fb = tape.constant(Tensor::zeros(&[hidden]));
        let mut vhat_summary = tape.constant(Tensor::zeros(&[vc]));
        let mut gru = self.stl.initial_state(b);
        let mut trace = Vec::with_capacity(self.config.loops);
        let mut ls = tape.scalar(0.0);
        let mut sample_nll = Vec::new();
        for _ in 0..self.config.loops {
            let (theta, state, u, f, view) = self.loop_front(b, cube, v_summary, gru, h_fb, vhat_summary)?;
            gru = state;
            let (loop_loss, seq) = match objective.estimator {
                Estimator::Soft => {
                    let seq = self.teacher_forced(b, &view, &prefix, &targets, None)?;
                    (seq.nll, seq)
                }
                Estimator::MonteCarlo => {
                    let s = objective.mc_samples.max(1);
                    let mut total = tape.scalar(0.0);
                    let mut first = None;
                    for _ in 0..s {
                        let seq = self.teacher_forced(b, &view, &prefix, &targets, Some(&mut noise.rng))?;
                        let advantage = seq.nll.item() - baseline;
                        sample_nll.push(seq.nll.item());
                        let score = seq.log_alpha.scale(advantage).zero_valued()?;
                        total = total.add(seq.nll.add(score)?)?;
                        first.get_or_insert(seq);
                    }
                    (total.scale(1.0 / s as f64), first.expect("at least one sample"))
                }
            };
            ls = ls.add(loop_loss)?;
            h_fb = seq.h;
            vhat_summary = channel_mean(f.vhat)?;
            trace.push(LoopState { theta, warped: u, filter: f, h: seq.h, alphas: seq.alphas, token_log_probs: seq.token_log_probs });
        }
        let ls = ls.scale(1.0 / self.config.loops as f64);

        let last = trace.last().expect("loops >= 1").filter.vhat;
        let (loss, ld, variational) = match objective.kind {
            LossKind::Attention => {
                let s = last.shape();
                let pooled = last.reshape(&[s[0] * s[1], s[2]])?.max_axis0()?;
                let scores = self.word_head.forward(b, pooled)?;
                let mut omega = caption.to_vec();
                omega.sort_unstable();
                omega.dedup();
                let ld = discriminative(scores, &omega)?;
                (combined(ls, ld, objective.lambda)?, Some(ld), None)
            }
            LossKind::Variational => {
                let w_mean = self.text.embed(b, caption)?.mean()?;
                let first = trace[0].filter.vhat;
                let terms = self.vae.terms(b, first, w_mean, &noise.eps, image)?;
                let bound = variational_objective(ls.neg(), terms.recon, terms.kl, objective.beta)?;
                (bound.neg(), None, Some(terms))
            }
        };
        Ok(ForwardOut { loss, ls, ld, variational, sample_nll, trace })
    }

    /// Decodes a caption: greedy in the early loop iterations, beam search
    /// of width `beam` in the last. Returns word ids without BOS/EOS.
    pub fn infer<'t>(&self, b: &Binder<'t, '_>, image: &Tensor, beam: usize, max_len: usize) -> Result<Inference<'t>> {
        let tape = b.tape();
        let (cube, _) = self.encoder.encode(b, tape.constant(image.clone()))?;
        let v_summary = channel_mean(cube)?;
        let hidden = self.config.decoder.hidden;
        let vc = self.filter.output_shape().2;
        let mut h_fb = tape.constant(Tensor::zeros(&[hidden]));
        let mut vhat_summary = tape.constant(Tensor::zeros(&[vc]));
        let mut gru = self.stl.initial_state(b);
        let mut trace = Vec::new();
        let mut tokens = Vec::new();
        for t in 0..self.config.loops {
            let (theta, state, u, f, view) = self.loop_front(b, cube, v_summary, gru, h_fb, vhat_summary)?;
            gru = state;
            let width = if t + 1 == self.config.loops { beam.max(1) } else { 1 };
            let best = self.beam_search(b, &view, width, max_len)?;
            h_fb = best.dec.h;
            vhat_summary = channel_mean(f.vhat)?;
            tokens = best.tokens;
            trace.push(LoopState { theta, warped: u, filter: f, h: best.dec.h, alphas: best.alphas, token_log_probs: best.log_probs });
        }
        tokens.retain(|&t| t != EOS);
        Ok(Inference { tokens, trace })
    }

    fn beam_search<'t>(&self, b: &Binder<'t, '_>, view: &LoopView<'t>, width: usize, max_len: usize) -> Result<Hyp<'t>> {
        let start = self.text.forward_step(b, BOS, self.text.zero_state(b))?;
        let mut live = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            dec: self.decoder.init_state(b, view.ann)?,
            text: start,
            alphas: Vec::new(),
            log_probs: Vec::new(),
        }];
        let mut done: Vec<Hyp<'t>> = Vec::new();
        for len in 0..=max_len {
            let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
            let mut stepped = Vec::with_capacity(live.len());
            for (hi, hyp) in live.iter().enumerate() {
                let (dec, logp, alpha, _) = self.word_step(b, view, hyp.dec, hyp.text.0, None)?;
                let lp = logp.value();
                for (tok, &l) in lp.data().iter().enumerate() {
                    if tok == BOS || tok == PAD || (len == max_len && tok != EOS) {
                        continue;
                    }
                    cands.push((hyp.score + l, hi, tok, l));
                }
                stepped.push((dec, alpha));
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut next = Vec::with_capacity(width);
            for &(score, hi, tok, l) in cands.iter().take(width) {
                let parent = &live[hi];
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                let mut alphas = parent.alphas.clone();
                alphas.push(stepped[hi].1);
                let mut log_probs = parent.log_probs.clone();
                log_probs.push(l);
                let text = if tok == EOS { parent.text } else { self.text.forward_step(b, tok, parent.text)? };
                let hyp = Hyp { tokens, score, dec: stepped[hi].0, text, alphas, log_probs };
                if tok == EOS {
                    done.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            live = next;
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if live.is_empty() || best_done >= best_live {
                break;
            }
        }
        let pool = if done.is_empty() { live } else { done };
        pool.into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
            .ok_or_else(|| Error::Input("beam search produced no hypothesis".into()))
    }

    /// Teacher-forced natural-log probabilities of `caption` + EOS under the
    /// final loop iteration.
    pub fn token_log_probs(&self, store: &ParamStore, image: &Tensor, caption: &[usize]) -> Result<Vec<f64>> {
        let tape = crate::autodiff::Tape::new();
        let b = Binder::frozen(&tape, store);
        let objective = Objective { kind: LossKind::Attention, lambda: 0.0, ..Objective::default() };
        let mut noise = Noise::new(0, 0, 0);
        let out = self.forward(&b, image, caption, &objective, &mut noise, 0.0)?;
        Ok(out.trace.last().expect("loops >= 1").token_log_probs.clone())
    }

    /// Convenience: decodes with frozen parameters.
    pub fn caption(&self, store: &ParamStore, image: &Tensor, beam: usize, max_len: usize) -> Result<Vec<usize>> {
        let tape = crate::autodiff::Tape::new();
        let b = Binder::frozen(&tape, store);
        Ok(self.infer(&b, image, beam, max_len)?.tokens)
    }

    pub fn filter_mode(&self) -> FilterMode {
        self.config.filter.mode
    }
}

/// Index drawn from the categorical distribution `p`.
fn draw(p: &Tensor, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.data().iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.numel() - 1
}
