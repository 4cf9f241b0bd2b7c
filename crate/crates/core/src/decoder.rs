//! LSTM decoder with soft attention over annotations.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::nn::{Linear, LstmCell};
use crate::params::{Binder, Init, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub attn_dim: usize,
    /// Decoder steps accumulated per emitted word.
    pub k: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { hidden: 64, attn_dim: 32, k: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

/// Weights of the attention score, the LSTM and the output layer.
///
/// `annot` is the annotation width `d`, `summary` the length of the cube
/// summary and `word` the width of the previous-word vector.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub annot: usize,
    pub summary: usize,
    pub word: usize,
    pub vocab: usize,
    init_h: Linear,
    init_c: Linear,
    att_r: Linear,
    att_q: Linear,
    att_l: Linear,
    pub att_v: ParamId,
    lstm: LstmCell,
    out_e: Linear,
    out_h: Linear,
    out_f: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig, annot: usize, summary: usize, word: usize, vocab: usize) -> Result<Self> {
        let (hs, ad) = (config.hidden, config.attn_dim);
        let no_bias = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            Linear::with_init(store, name, i, o, Init::Glorot { fan_in: i, fan_out: o }, None)
        };
        Ok(Self {
            init_h: Linear::new(store, "dec.init_h", annot, hs)?,
            init_c: Linear::new(store, "dec.init_c", annot, hs)?,
            att_r: no_bias(store, "dec.att_r", summary, ad)?,
            att_q: no_bias(store, "dec.att_q", annot, ad)?,
            att_l: Linear::new(store, "dec.att_l", word, ad)?,
            att_v: store.add("dec.att_v", &[ad], Init::Uniform((3.0 / ad as f64).sqrt()))?,
            lstm: LstmCell::new(store, "dec.lstm", word + annot, hs)?,
            out_e: Linear::new(store, "dec.out_e", word, vocab)?,
            out_h: no_bias(store, "dec.out_h", hs, vocab)?,
            out_f: no_bias(store, "dec.out_f", annot, vocab)?,
            config,
            annot,
            summary,
            word,
            vocab,
        })
    }

    fn check_annotations(&self, ann: Var<'_>) -> Result<()> {
        let s = ann.shape();
        if s.len() != 2 || s[1] != self.annot {
            return shape_err(format!("annotations must be [L, {}], got {s:?}", self.annot));
        }
        Ok(())
    }

    /// `h_0, c_0 = tanh(linear(mean annotation))`.
    pub fn init_state<'t>(&self, b: &Binder<'t, '_>, ann: Var<'t>) -> Result<DecoderState<'t>> {
        self.check_annotations(ann)?;
        let mean = ann.mean_axis0()?;
        Ok(DecoderState { h: self.init_h.forward(b, mean)?.tanh(), c: self.init_c.forward(b, mean)?.tanh() })
    }

    /// Attention scores `vᵀ tanh(R·summary + Q·a_i + L·w_pre + b)` for all `i`.
    pub fn scores<'t>(&self, b: &Binder<'t, '_>, ann: Var<'t>, summary: Var<'t>, w_pre: Var<'t>) -> Result<Var<'t>> {
        self.check_annotations(ann)?;
        if summary.shape() != [self.summary] || w_pre.shape() != [self.word] {
            return shape_err(format!(
                "attend wants summary [{}] and word [{}], got {:?} / {:?}",
                self.summary,
                self.word,
                summary.shape(),
                w_pre.shape()
            ));
        }
        let shared = self.att_r.forward(b, summary)?.add(self.att_l.forward(b, w_pre)?)?;
        self.att_q.forward(b, ann)?.add(shared)?.tanh().matmul(b.var(self.att_v))
    }

    /// Attention weights `α` over the annotations.
    pub fn attend<'t>(&self, b: &Binder<'t, '_>, ann: Var<'t>, summary: Var<'t>, w_pre: Var<'t>) -> Result<Var<'t>> {
        self.scores(b, ann, summary, w_pre)?.softmax()
    }

    /// One LSTM step on `[w_pre; ẑ]` and the logits
    /// `E·w_pre + L_h·h + F·ẑ + bias`.
    pub fn step<'t>(&self, b: &Binder<'t, '_>, state: DecoderState<'t>, w_pre: Var<'t>, zhat: Var<'t>) -> Result<(DecoderState<'t>, Var<'t>)> {
        let (h, c) = self.lstm.step(b, Var::concat(&[w_pre, zhat])?, state.h, state.c)?;
        let logits = self.out_e.forward(b, w_pre)?.add(self.out_h.forward(b, h)?)?.add(self.out_f.forward(b, zhat)?)?;
        Ok((DecoderState { h, c }, logits))
    }
}

/// Soft context `Σ_i α_i·a_i`.
pub fn soft_context<'t>(ann: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    alpha.matmul(ann)
}

/// The annotation picked by a one-hot draw.
pub fn hard_context<'t>(ann: Var<'t>, index: usize) -> Result<Var<'t>> {
    ann.row(index)
}

/// Sums logits over `k` decoder steps before emitting a word.
#[derive(Clone, Debug)]
pub struct Accumulator<'t> {
    k: usize,
    count: usize,
    sum: Option<Var<'t>>,
}

impl<'t> Accumulator<'t> {
    pub fn new(k: usize) -> Self {
        Self { k: k.max(1), count: 0, sum: None }
    }

    /// Adds `logits`. Every `k`-th call returns the accumulated logits, whose
    /// softmax is the word distribution, and resets.
    pub fn push(&mut self, logits: Var<'t>) -> Result<Option<Var<'t>>> {
        self.sum = Some(match self.sum {
            Some(s) => s.add(logits)?,
            None => logits,
        });
        self.count += 1;
        if self.count == self.k {
            self.count = 0;
            Ok(self.sum.take())
        } else {
            Ok(None)
        }
    }
}
