//! Adam, checkpoints, evaluation and the epoch loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::Config;
use crate::data::Item;
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, perplexity, Bleu};
use crate::model::{Model, Noise};
use crate::params::{fnv1a, Binder, ParamGrads, ParamStore};
use crate::tensor::Tensor;
use crate::text::{tokenize, Vocabulary};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Parameters without a gradient are left alone, moments
    /// included. Any non-finite gradient aborts before anything changes.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if !g.is_finite() {
                    return Err(Error::Numerics(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

const MAGIC: &[u8; 8] = b"RICCKPT\0";
const VERSION: u32 = 1;

/// Named tensor records behind a versioned header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let config_hash = u64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let len = u32::from_le_bytes(b4) as usize;
            if len > 4096 {
                return Err(Error::Format("implausible record name length".into()));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not utf-8".into()))?;
            records.push((name, Tensor::read_from(r)?));
        }
        Ok(Self { config_hash, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Copies every `param/<name>` record into `store`, which must have the
    /// same parameter set.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self
                .get(&format!("param/{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            store.set(&name, t.clone())?;
        }
        Ok(())
    }
}

/// An image with its caption as tokens and ids.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Tensor,
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

impl Example {
    pub fn from_items(items: &[Item], vocab: &Vocabulary) -> Vec<Example> {
        items
            .iter()
            .map(|it| {
                let tokens = tokenize(&it.caption);
                let ids = vocab.encode(&tokens);
                Example { image: it.image.clone(), tokens, ids }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub bleu: Bleu,
    pub perplexity: f64,
    pub exact_match: f64,
    pub captions: Vec<Vec<String>>,
}

/// Decodes every example and scores against its own caption; perplexity is
/// teacher-forced over caption tokens plus EOS.
pub fn evaluate(model: &Model, store: &ParamStore, vocab: &Vocabulary, examples: &[Example], beam: usize, max_len: usize) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(examples.len());
    let mut log_probs = Vec::new();
    let mut exact = 0usize;
    let mut captions = Vec::with_capacity(examples.len());
    for ex in examples {
        let hyp = vocab.decode(&model.caption(store, &ex.image, beam, max_len)?);
        if hyp == ex.tokens {
            exact += 1;
        }
        log_probs.extend(model.token_log_probs(store, &ex.image, &ex.ids)?);
        captions.push(hyp.clone());
        pairs.push((hyp, vec![ex.tokens.clone()]));
    }
    Ok(EvalReport {
        bleu: corpus_bleu(&pairs, false),
        perplexity: perplexity(&log_probs),
        exact_match: if examples.is_empty() { 0.0 } else { exact as f64 / examples.len() as f64 },
        captions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bleu4: f64,
    pub val_ppl: f64,
}

impl EpochRecord {
    /// One tab-separated metrics line, without newline.
    pub fn line(&self) -> String {
        format!("{}\t{:.12}\t{:.12}\t{:.12}", self.epoch, self.train_loss, self.val_bleu4, self.val_ppl)
    }
}

/// Owns the model, parameters and optimizer for one run.
pub struct Trainer {
    pub config: Config,
    pub vocab: Vocabulary,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub baseline: f64,
    pub best_bleu: f64,
    pub stale: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    /// Builds the vocabulary from the training captions and a fresh model.
    pub fn new(config: Config, train: &[Item], val: &[Item]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        let corpus: Vec<Vec<String>> = train.iter().map(|it| tokenize(&it.caption)).collect();
        let vocab = Vocabulary::build(&corpus, config.min_count);
        Self::with_vocab(config, vocab, train, val)
    }

    pub fn with_vocab(config: Config, vocab: Vocabulary, train: &[Item], val: &[Item]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        let (store, model) = Model::build(config.seed, config.model.clone(), vocab.len())?;
        let adam = Adam::new(&store, config.train.lr);
        Ok(Self {
            train: Example::from_items(train, &vocab),
            val: Example::from_items(val, &vocab),
            config,
            vocab,
            model,
            store,
            adam,
            epoch: 0,
            baseline: 0.0,
            best_bleu: f64::NEG_INFINITY,
            stale: 0,
            history: Vec::new(),
        })
    }

    /// Item order for `epoch`, independent of every other random stream.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let key = format!("shuffle/{}/{epoch}", self.config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()));
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Forward and backward for one item. Returns its loss and gradients.
    pub fn item_step(&mut self, epoch: usize, index: usize) -> Result<(f64, ParamGrads)> {
        let ex = &self.train[index];
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store);
        let cfg = &self.config.model;
        let mut noise = Noise::for_item(self.config.seed, epoch, index, cfg.loops, cfg.vae.latent);
        let out = self.model.forward(&b, &ex.image, &ex.ids, &self.config.objective, &mut noise, self.baseline)?;
        let loss = out.loss.item();
        let grads = b.grads(tape.backward(out.loss)?);
        for s in out.sample_nll {
            self.baseline = 0.9 * self.baseline + 0.1 * s;
        }
        Ok((loss, grads))
    }

    /// Mean loss of a batch with its mean gradient.
    pub fn batch_step(&mut self, epoch: usize, batch: &[usize]) -> Result<(Vec<f64>, ParamGrads)> {
        let mut grads = ParamGrads::empty(&self.store);
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let (l, g) = self.item_step(epoch, i)?;
            losses.push(l);
            grads.accumulate(&g);
        }
        grads.scale(1.0 / batch.len() as f64);
        Ok((losses, grads))
    }

    /// Runs one epoch of updates and evaluation. Returns the metrics record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let order = self.order(epoch);
        let mut losses = vec![0.0; self.train.len()];
        for batch in order.chunks(self.config.train.batch_size.max(1)) {
            let (batch_losses, mut grads) = self.batch_step(epoch, batch)?;
            for (&i, l) in batch.iter().zip(batch_losses) {
                losses[i] = l;
            }
            clip_global_norm(&mut grads, self.config.train.clip_norm);
            self.adam.update(&mut self.store, &grads)?;
        }
        // Summed in item order so the value does not depend on the shuffle.
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let (mut val_bleu4, mut val_ppl) = (f64::NAN, f64::NAN);
        let every = self.config.train.eval_every.max(1);
        if !self.val.is_empty() && (epoch.is_multiple_of(every) || epoch == self.config.train.epochs) {
            let r = evaluate(&self.model, &self.store, &self.vocab, &self.val, self.config.beam, self.config.max_len)?;
            val_bleu4 = r.bleu.composite();
            val_ppl = r.perplexity;
        }
        self.epoch = epoch;
        let rec = EpochRecord { epoch, train_loss, val_bleu4, val_ppl };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// True when the stopping rules say the run is over.
    fn should_stop(&mut self, rec: &EpochRecord) -> Result<bool> {
        let tc = &self.config.train;
        if self.epoch >= tc.epochs {
            return Ok(true);
        }
        if tc.patience > 0 && !rec.val_bleu4.is_nan() {
            if rec.val_bleu4 > self.best_bleu {
                self.best_bleu = rec.val_bleu4;
                self.stale = 0;
            } else {
                self.stale += 1;
                if self.stale >= tc.patience {
                    return Ok(true);
                }
            }
        }
        if tc.stop_accuracy > 0.0 && self.epoch.is_multiple_of(tc.eval_every.max(1)) {
            let r = evaluate(&self.model, &self.store, &self.vocab, &self.train, self.config.beam, self.config.max_len)?;
            if r.exact_match >= tc.stop_accuracy {
                return Ok(true);
            }
        }
        Ok(false)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut records = Vec::new();
        for (name, t) in self.store.iter() {
            records.push((format!("param/{name}"), t.clone()));
        }
        for ((name, _), m) in self.store.iter().zip(&self.adam.m) {
            records.push((format!("adam.m/{name}"), m.clone()));
        }
        for ((name, _), v) in self.store.iter().zip(&self.adam.v) {
            records.push((format!("adam.v/{name}"), v.clone()));
        }
        for (k, v) in [
            ("step", self.adam.step as f64),
            ("epoch", self.epoch as f64),
            ("baseline", self.baseline),
            ("best_bleu", self.best_bleu),
            ("stale", self.stale as f64),
        ] {
            records.push((format!("meta/{k}"), Tensor::scalar(v)));
        }
        Checkpoint { config_hash: self.config.architecture_hash(), records }
    }

    /// Loads parameters, optimizer moments and counters.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config_hash != self.config.architecture_hash() {
            return Err(Error::Config("checkpoint was written by a different architecture".into()));
        }
        ckpt.restore_params(&mut self.store)?;
        let names: Vec<String> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let get = |prefix: &str| {
                ckpt.get(&format!("{prefix}/{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}/{name}")))
            };
            self.adam.m[i] = get("adam.m")?;
            self.adam.v[i] = get("adam.v")?;
        }
        let meta = |k: &str| {
            ckpt.get(&format!("meta/{k}"))
                .map(Tensor::item)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks meta/{k}")))
        };
        self.adam.step = meta("step")? as u64;
        self.epoch = meta("epoch")? as usize;
        self.baseline = meta("baseline")?;
        self.best_bleu = meta("best_bleu")?;
        self.stale = meta("stale")? as usize;
        Ok(())
    }

    /// Trains until a stopping rule fires. With `out`, writes `config.txt`,
    /// `vocab.txt`, `metrics.tsv` and `model.ckpt` there.
    pub fn fit(&mut self, out: Option<&Path>) -> Result<Vec<EpochRecord>> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("config.txt"), self.config.to_text())?;
                let mut v = BufWriter::new(File::create(dir.join("vocab.txt"))?);
                self.vocab.write_to(&mut v)?;
                v.flush()?;
                let path = dir.join("metrics.tsv");
                let file = if self.epoch == 0 {
                    File::create(&path)?
                } else {
                    truncate_log(&path, self.epoch)?;
                    OpenOptions::new().append(true).open(&path)?
                };
                Some(file)
            }
            None => None,
        };
        let mut records = Vec::new();
        if self.epoch >= self.config.train.epochs {
            return Ok(records);
        }
        loop {
            let rec = self.run_epoch()?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", rec.line())?;
                f.flush()?;
            }
            let stop = self.should_stop(&rec)?;
            records.push(rec);
            if let Some(dir) = out {
                let every = self.config.train.checkpoint_every;
                if stop || (every > 0 && self.epoch.is_multiple_of(every)) {
                    self.checkpoint().save(&dir.join("model.ckpt"))?;
                }
            }
            if stop {
                return Ok(records);
            }
        }
    }

    /// Continues a run from `dir/model.ckpt`, reusing its vocabulary.
    pub fn resume(config: Config, train: &[Item], val: &[Item], dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::read_from(BufReader::new(File::open(dir.join("vocab.txt"))?))?;
        let mut t = Self::with_vocab(config, vocab, train, val)?;
        t.restore(&Checkpoint::load(&dir.join("model.ckpt"))?)?;
        Ok(t)
    }
}

/// Keeps the first `epochs` lines of a metrics log.
fn truncate_log(path: &Path, epochs: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let kept: String = text.lines().take(epochs).map(|l| format!("{l}\n")).collect();
    fs::write(path, kept)?;
    Ok(())
}

/// A trained run loaded back from its output directory.
pub struct Run {
    pub config: Config,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub model: Model,
}

impl Run {
    /// Reads `config.txt`, `vocab.txt` and `model.ckpt`; `overrides` are
    /// applied on top of the stored config.
    pub fn load(dir: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = Config::parse_text(&fs::read_to_string(dir.join("config.txt"))?)?;
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        let vocab = Vocabulary::read_from(BufReader::new(File::open(dir.join("vocab.txt"))?))?;
        let (mut store, model) = Model::build(config.seed, config.model.clone(), vocab.len())?;
        let ckpt = Checkpoint::load(&dir.join("model.ckpt"))?;
        if ckpt.config_hash != config.architecture_hash() {
            return Err(Error::Config("overrides change the architecture of the stored model".into()));
        }
        ckpt.restore_params(&mut store)?;
        Ok(Self { config, vocab, store, model })
    }
}
