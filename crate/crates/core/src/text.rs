//! Tokenization, vocabulary and bidirectional LSTM caption embeddings.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::LstmCell;
use crate::params::{Binder, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const PAD: usize = 3;
pub const RESERVED: [&str; 4] = ["<UNK>", "<BOS>", "<EOS>", "<PAD>"];

/// Drops every non-alphabetic, non-whitespace character, lowercases, and
/// splits on whitespace. Hyphenated words fuse: `re-enter` becomes `reenter`.
pub fn tokenize(raw: &str) -> Vec<String> {
    let clean: String = raw
        .chars()
        .filter(|c| c.is_alphabetic() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    clean.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// count with ties broken lexicographically, after the reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for caption in corpus {
            for t in caption {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(t, c)| c >= min_count && !RESERVED.contains(&t)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
            .expect("reserved tokens filtered")
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Tokens up to the first EOS, skipping BOS and PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    /// One token per line in id order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        if lines.len() < RESERVED.len() || lines[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary file must start with the reserved tokens".into()));
        }
        Self::from_tokens(lines.into_iter().skip(4))
    }
}

/// Padded token ids, one row per caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionBatch {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl CaptionBatch {
    pub fn new(captions: &[Vec<usize>]) -> Self {
        let width = captions.iter().map(Vec::len).max().unwrap_or(0);
        let ids = captions
            .iter()
            .map(|c| {
                let mut row = c.clone();
                row.resize(width, PAD);
                row
            })
            .collect();
        Self { ids, lengths: captions.iter().map(Vec::len).collect() }
    }

    pub fn item(&self, i: usize) -> &[usize] {
        &self.ids[i][..self.lengths[i]]
    }
}

/// Word table plus forward and backward LSTMs over it.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub dim: usize,
}

/// Per-position states of both directions.
#[derive(Clone, Debug)]
pub struct BiStates<'t> {
    pub forward: Vec<Var<'t>>,
    pub backward: Vec<Var<'t>>,
}

impl<'t> BiStates<'t> {
    /// `w_i = [forward_i; backward_i]`.
    pub fn joined(&self, i: usize) -> Result<Var<'t>> {
        Var::concat(&[self.forward[i], self.backward[i]])
    }

    /// Mean of the joined states over the caption.
    pub fn mean(&self) -> Result<Var<'t>> {
        let rows: Vec<Var<'t>> = (0..self.forward.len()).map(|i| self.joined(i)).collect::<Result<_>>()?;
        let n = rows.len();
        let d = rows[0].numel();
        Var::concat(&rows)?.reshape(&[n, d])?.mean_axis0()
    }
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, vocab: usize, dim: usize) -> Result<Self> {
        let table = store.add("text.table", &[vocab, dim], Init::Uniform(0.1))?;
        let fwd = LstmCell::new(store, "text.fwd", dim, dim)?;
        let bwd = LstmCell::new(store, "text.bwd", dim, dim)?;
        Ok(Self { table, fwd, bwd, dim })
    }

    pub fn zero_state<'t>(&self, b: &Binder<'t, '_>) -> (Var<'t>, Var<'t>) {
        let z = b.tape().constant(Tensor::zeros(&[self.dim]));
        (z, z)
    }

    pub fn lookup<'t>(&self, b: &Binder<'t, '_>, token: usize) -> Result<Var<'t>> {
        b.var(self.table).row(token)
    }

    /// Advances the forward reader by one token.
    pub fn forward_step<'t>(&self, b: &Binder<'t, '_>, token: usize, state: (Var<'t>, Var<'t>)) -> Result<(Var<'t>, Var<'t>)> {
        self.fwd.step(b, self.lookup(b, token)?, state.0, state.1)
    }

    /// Both directions over `ids` (true length only).
    pub fn embed<'t>(&self, b: &Binder<'t, '_>, ids: &[usize]) -> Result<BiStates<'t>> {
        if ids.is_empty() {
            return Err(Error::Input("cannot embed an empty caption".into()));
        }
        let words: Vec<Var<'t>> = ids.iter().map(|&t| self.lookup(b, t)).collect::<Result<_>>()?;
        let run = |cell: &LstmCell, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<(usize, Var<'t>)>> {
            let (mut h, mut c) = self.zero_state(b);
            let mut out = Vec::new();
            for i in order {
                (h, c) = cell.step(b, words[i], h, c)?;
                out.push((i, h));
            }
            Ok(out)
        };
        let forward = run(&self.fwd, &mut (0..ids.len()))?.into_iter().map(|(_, h)| h).collect();
        let mut backward: Vec<(usize, Var<'t>)> = run(&self.bwd, &mut (0..ids.len()).rev())?;
        backward.reverse();
        Ok(BiStates { forward, backward: backward.into_iter().map(|(_, h)| h).collect() })
    }

    /// Joined states of a padded row as `[M, 2E]`, zero past `length`.
    pub fn embed_padded<'t>(&self, b: &Binder<'t, '_>, ids: &[usize], length: usize) -> Result<Var<'t>> {
        let states = self.embed(b, &ids[..length])?;
        let mut rows: Vec<Var<'t>> = (0..length).map(|i| states.joined(i)).collect::<Result<_>>()?;
        if ids.len() > length {
            rows.push(b.tape().constant(Tensor::zeros(&[(ids.len() - length) * 2 * self.dim])));
        }
        Var::concat(&rows)?.reshape(&[ids.len(), 2 * self.dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_all;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("A dog runs!"), ["a", "dog", "runs"]);
        assert!(tokenize("   ").is_empty());
        assert_eq!(tokenize("Re-enter the 2nd room"), ["reenter", "the", "nd", "room"]);
        let once = tokenize("Red  squares, LEFT of\tit.");
        assert_eq!(tokenize(&once.join(" ")), once);
    }

    #[test]
    fn vocab_thresholds_and_order() {
        let corpus = vec![toks("b b b b b a a a a a c c c c")];
        let v = Vocabulary::build(&corpus, 5);
        assert_eq!(v.tokens(), ["<UNK>", "<BOS>", "<EOS>", "<PAD>", "a", "b"]);
        assert_eq!(v.id("c"), UNK);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id)), id);
        }
        let once = Vocabulary::build(&[toks("x x x x x")], 5);
        assert_eq!(once.len(), 5);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(&[toks("red red square square")], 1);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(Vocabulary::read_from(&buf[..]).unwrap(), v);
        assert!(Vocabulary::read_from(&b"a\nb\n"[..]).is_err());
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::build(&[toks("a red square")], 1);
        let ids = [BOS, v.id("a"), v.id("red"), EOS, v.id("square")];
        assert_eq!(v.decode(&ids), ["a", "red"]);
    }

    #[test]
    fn batch_pads_past_length() {
        let b = CaptionBatch::new(&[vec![5, 6, 7], vec![8]]);
        assert_eq!(b.ids[1], [8, PAD, PAD]);
        assert_eq!(b.item(1), [8]);
        assert_eq!(b.lengths, [3, 1]);
    }

    #[test]
    fn padding_rows_are_zero_and_single_token_works() {
        let mut s = ParamStore::new(1);
        let enc = TextEncoder::new(&mut s, 8, 3).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let e = enc.embed_padded(&b, &[5, 6, PAD, PAD], 2).unwrap().value();
        assert_eq!(e.shape(), &[4, 6]);
        assert!(e.data()[12..].iter().all(|&x| x == 0.0));
        let one = enc.embed(&b, &[4]).unwrap();
        assert_eq!(one.joined(0).unwrap().numel(), 6);
        assert!(enc.embed(&b, &[]).is_err());
    }

    #[test]
    fn tied_directions_mirror_under_reversal() {
        let mut s = ParamStore::new(2);
        let enc = TextEncoder::new(&mut s, 9, 4).unwrap();
        for (f, bw) in [(enc.fwd.weight, enc.bwd.weight), (enc.fwd.bias, enc.bwd.bias)] {
            let v = s.get(f).clone();
            *s.get_mut(bw) = v;
        }
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let ids = [4, 7, 5, 8];
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let a = enc.embed(&b, &ids).unwrap();
        let r = enc.embed(&b, &rev).unwrap();
        for i in 0..4 {
            assert!(r.forward[i].value().max_abs_diff(&a.backward[3 - i].value()) < 1e-15);
        }
    }

    #[test]
    fn bidirectional_gradient_matches_finite_differences() {
        let mut s = ParamStore::new(3);
        let enc = TextEncoder::new(&mut s, 6, 3).unwrap();
        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let b = Binder::new(&tape, store);
            let st = enc.embed(&b, &[4, 5, 4]).unwrap();
            let w = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 0.3, 1.5, -1.0]));
            let loss = st.mean().unwrap().mul(w).unwrap().sum().add(st.joined(1).unwrap().square().sum()).unwrap();
            (loss.item(), b.grads(tape.backward(loss).unwrap()))
        };
        let (_, g) = run(&s);
        for id in s.ids().collect::<Vec<_>>() {
            let err = check_all(&s.get(id).clone(), &g.dense(&s, id), |p| {
                let mut s2 = s.clone();
                *s2.get_mut(id) = p.clone();
                run(&s2).0
            });
            assert!(err < 1e-4, "{}: {err}", s.name(id));
        }
    }
}
